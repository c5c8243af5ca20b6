use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Solid ball; `size` is the radius.
    Sphere,
    /// Axis-aligned cuboid; `size` is the half-extent, drawn per axis.
    Box,
    /// Hollow ball; `size` is the outer radius, thickness is `shell_fraction` of it.
    Shell,
}

/// One foreground class. Class ids follow list order starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub family: ShapeFamily,
    /// Inclusive range of the characteristic size in voxels.
    pub size: [f64; 2],
    /// Inclusive range of objects per volume.
    pub count: [usize; 2],
    /// Mean intensity per channel.
    pub intensity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub extent: [usize; 3],
    pub channels: usize,
    pub background: Vec<f64>,
    pub classes: Vec<ClassSpec>,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub spacing: [f64; 3],
    #[serde(default = "default_shell_fraction")]
    pub shell_fraction: f64,
}

fn default_shell_fraction() -> f64 {
    0.4
}

impl SynthSpec {
    /// Background plus foreground classes.
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("classes", "need at least one foreground class"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.extent.contains(&0) {
            return Err(Error::config("extent", "every axis must be positive"));
        }
        if self.background.len() != self.channels {
            return Err(Error::config("background", format!("needs {} intensities", self.channels)));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.intensity.len() != self.channels {
                return Err(Error::config("classes", format!("class {} needs {} intensities", i + 1, self.channels)));
            }
            if !(c.size[0] > 0.0 && c.size[0] <= c.size[1]) || c.count[0] == 0 || c.count[0] > c.count[1] {
                return Err(Error::config("classes", format!("class {} has an empty size or count range", i + 1)));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        Ok(())
    }
}

/// Voxel centers inside one object.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub family: ShapeFamily,
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub inner: f64,
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.family {
            ShapeFamily::Box => (0..3).all(|a| d[a].abs() <= self.half[a]),
            ShapeFamily::Sphere | ShapeFamily::Shell => {
                let r2 = d.iter().map(|v| v * v).sum::<f64>();
                let r = self.half[0];
                r2 <= r * r && r2 >= self.inner * self.inner
            }
        }
    }

    /// Bounding box (inclusive voxel ranges) clipped to `extent`.
    fn bounds(&self, extent: [usize; 3]) -> [(usize, usize); 3] {
        let mut b = [(0, 0); 3];
        for a in 0..3 {
            let lo = (self.center[a] - self.half[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.half[a]).ceil() as usize).min(extent[a] - 1);
            b[a] = (lo, hi);
        }
        b
    }

    /// Writes `class` into every background voxel the shape covers.
    pub fn rasterize(&self, labels: &mut LabelMap, class: u16) -> usize {
        let extent = labels.shape();
        let b = self.bounds(extent);
        let mut n = 0;
        for d in b[0].0..=b[0].1 {
            for h in b[1].0..=b[1].1 {
                for w in b[2].0..=b[2].1 {
                    if self.contains([d as f64, h as f64, w as f64]) {
                        let i = labels.index(d, h, w);
                        if labels.data()[i] == 0 {
                            labels.data_mut()[i] = class;
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    }
}

fn draw_shape(family: ShapeFamily, size: [f64; 2], extent: [usize; 3], shell_fraction: f64, rng: &mut ChaCha8Rng) -> Shape {
    let s = rng.gen_range(size[0]..=size[1]);
    let half = match family {
        ShapeFamily::Box => [0, 1, 2].map(|_| rng.gen_range(size[0]..=size[1])),
        _ => [s; 3],
    };
    let inner = if family == ShapeFamily::Shell { s * (1.0 - shell_fraction) } else { 0.0 };
    let center = [0, 1, 2].map(|a| {
        let lo = half[a].min(extent[a] as f64 / 2.0);
        let hi = (extent[a] as f64 - 1.0 - half[a]).max(lo);
        rng.gen_range(lo..=hi)
    });
    Shape { family, center, half, inner }
}

/// Generates one volume. Objects never overwrite each other; a placement is
/// retried a few times if it lands entirely on existing foreground.
pub fn gen_volume(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Volume> {
    spec.validate()?;
    let mut labels = LabelMap::zeros(spec.extent);
    for (ci, class) in spec.classes.iter().enumerate() {
        let id = (ci + 1) as u16;
        let count = rng.gen_range(class.count[0]..=class.count[1]);
        for _ in 0..count {
            for _attempt in 0..8 {
                let shape = draw_shape(class.family, class.size, spec.extent, spec.shell_fraction, rng);
                if shape.rasterize(&mut labels, id) > 0 {
                    break;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let vox = labels.len();
    let mut img = vec![0f32; spec.channels * vox];
    for c in 0..spec.channels {
        for (i, &l) in labels.data().iter().enumerate() {
            let mean = if l == 0 { spec.background[c] } else { spec.classes[l as usize - 1].intensity[c] };
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            img[c * vox + i] = (mean + n) as f32;
        }
    }
    let e = spec.extent;
    let image = Tensor::new(vec![spec.channels, e[0], e[1], e[2]], img)?;
    Volume::new(image, labels, spec.spacing)
}

/// `n` volumes from a single seeded stream.
pub fn gen_dataset(spec: &SynthSpec, n: usize, seed: u64) -> Result<Vec<Volume>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_volume(spec, &mut rng)).collect()
}
