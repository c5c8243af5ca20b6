use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map over `D, H, W` voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u16>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::invalid(format!("label map shape {shape:?} does not hold {} voxels", data.len())));
        }
        Ok(LabelMap { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelMap { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u16 {
        self.data[self.index(d, h, w)]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, class: u16) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.data.iter().map(|&v| v as f32).collect()).expect("shape checked")
    }

    /// Inverse of [`LabelMap::to_tensor`]; values must be non-negative integers.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape: [usize; 3] = t
            .shape()
            .try_into()
            .map_err(|_| Error::invalid(format!("label tensor must be 3-D, got {:?}", t.shape())))?;
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f32 {
                    Ok(v as u16)
                } else {
                    Err(Error::invalid(format!("label value {v} is not a class id")))
                }
            })
            .collect::<Result<_>>()?;
        LabelMap::new(shape, data)
    }
}

/// Multi-channel image `C, D, H, W` with its label map and voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub image: Tensor,
    pub labels: LabelMap,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(image: Tensor, labels: LabelMap, spacing: [f64; 3]) -> Result<Self> {
        if image.ndim() != 4 || image.shape()[1..] != labels.shape() {
            return Err(Error::invalid(format!(
                "image {:?} and labels {:?} must share spatial extents",
                image.shape(),
                labels.shape()
            )));
        }
        Ok(Volume { image, labels, spacing })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.labels.shape()
    }
}
