//! Named-tensor storage, the weight file format, initialization and transfer.

pub mod init;
pub mod io;
pub mod store;

pub use init::init_weights;
pub use io::{load, save, WeightReader};
pub use store::WeightStore;
pub mod transfer;

pub use transfer::{is_head, transfer, LrMultiplierMap};
