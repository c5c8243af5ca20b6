use std::fmt;

/// Parameter whose stored shape disagrees with what a graph declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDiff {
    pub name: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

impl fmt::Display for ShapeDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: expected {:?}, found {:?}", self.name, self.expected, self.found)
    }
}

/// Section of a weight file in which decoding failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileSection {
    Magic,
    Version,
    ManifestLength,
    Manifest,
    Payload,
    Checksum,
}

impl fmt::Display for FileSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FileSection::Magic => "magic",
            FileSection::Version => "version",
            FileSection::ManifestLength => "manifest length",
            FileSection::Manifest => "manifest",
            FileSection::Payload => "payload",
            FileSection::Checksum => "checksum",
        };
        f.write_str(s)
    }
}

fn join_diffs(diffs: &[ShapeDiff]) -> String {
    diffs.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("unexpected parameters: {}", .0.join(", "))]
    UnexpectedParameters(Vec<String>),

    #[error("parameter shape mismatch: {}", join_diffs(.0))]
    ShapeMismatch(Vec<ShapeDiff>),

    #[error("malformed weight file ({section}): {detail}")]
    Format { section: FileSection, detail: String },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("non-finite loss at iteration {iteration} (lr {lr:.3e}, dice {dice}, ce {ce})")]
    NonFiniteLoss { iteration: usize, lr: f64, dice: f64, ce: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn format(section: FileSection, detail: impl Into<String>) -> Self {
        Error::Format { section, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
