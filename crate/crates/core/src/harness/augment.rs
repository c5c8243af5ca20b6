use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{LabelMap, Volume};
use crate::tensor::Tensor;

/// Image patch `C, D, H, W` with matching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Probabilities and ranges for the random augmentations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub mirror_prob: f64,
    pub brightness_prob: f64,
    pub brightness_std: f64,
    pub gamma_prob: f64,
    pub gamma_range: [f64; 2],
    pub scaling_prob: f64,
    pub scaling_range: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            mirror_prob: 0.5,
            brightness_prob: 0.15,
            brightness_std: 0.1,
            gamma_prob: 0.3,
            gamma_range: [0.7, 1.5],
            scaling_prob: 0.2,
            scaling_range: [0.85, 1.25],
        }
    }
}

/// Integer crop starting at `origin`; voxels outside the volume are zero.
pub fn crop(vol: &Volume, origin: [isize; 3], patch: [usize; 3]) -> Sample {
    let c = vol.channels();
    let [sd, sh, sw] = vol.spatial();
    let pv: usize = patch.iter().product();
    let sv = sd * sh * sw;
    let mut img = vec![0f32; c * pv];
    let mut lab = vec![0u16; pv];
    for d in 0..patch[0] {
        let zd = origin[0] + d as isize;
        if zd < 0 || zd >= sd as isize {
            continue;
        }
        for h in 0..patch[1] {
            let zh = origin[1] + h as isize;
            if zh < 0 || zh >= sh as isize {
                continue;
            }
            for w in 0..patch[2] {
                let zw = origin[2] + w as isize;
                if zw < 0 || zw >= sw as isize {
                    continue;
                }
                let src = vol.labels.index(zd as usize, zh as usize, zw as usize);
                let dst = (d * patch[1] + h) * patch[2] + w;
                lab[dst] = vol.labels.data()[src];
                for ch in 0..c {
                    img[ch * pv + dst] = vol.image.data()[ch * sv + src];
                }
            }
        }
    }
    Sample {
        image: Tensor::new(vec![c, patch[0], patch[1], patch[2]], img).expect("sized"),
        labels: LabelMap::new(patch, lab).expect("sized"),
    }
}

/// Crop of size `patch` centered on `center`, zoomed by `scale` (> 1 enlarges
/// structures). Image values are trilinearly interpolated, labels take the
/// nearest voxel; samples outside the volume are zero.
pub fn scaled_crop(vol: &Volume, center: [f64; 3], patch: [usize; 3], scale: f64) -> Sample {
    let c = vol.channels();
    let ext = vol.spatial();
    let pv: usize = patch.iter().product();
    let sv: usize = ext.iter().product();
    let mut img = vec![0f32; c * pv];
    let mut lab = vec![0u16; pv];
    let src_coord = |a: usize, p: usize| center[a] + (p as f64 - (patch[a] as f64 - 1.0) / 2.0) / scale;
    for d in 0..patch[0] {
        let z = src_coord(0, d);
        for h in 0..patch[1] {
            let y = src_coord(1, h);
            for w in 0..patch[2] {
                let x = src_coord(2, w);
                let dst = (d * patch[1] + h) * patch[2] + w;
                let q = [z, y, x];
                let near: Vec<isize> = q.iter().map(|v| v.round() as isize).collect();
                if (0..3).all(|a| near[a] >= 0 && near[a] < ext[a] as isize) {
                    lab[dst] = vol.labels.get(near[0] as usize, near[1] as usize, near[2] as usize);
                }
                let base: Vec<f64> = q.iter().map(|v| v.floor()).collect();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for corner in 0..8 {
                        let mut wgt = 1.0;
                        let mut idx = [0usize; 3];
                        let mut inside = true;
                        for a in 0..3 {
                            let hi = corner >> (2 - a) & 1;
                            let t = q[a] - base[a];
                            wgt *= if hi == 1 { t } else { 1.0 - t };
                            let coord = base[a] as isize + hi as isize;
                            if coord < 0 || coord >= ext[a] as isize {
                                inside = false;
                                break;
                            }
                            idx[a] = coord as usize;
                        }
                        if inside && wgt != 0.0 {
                            let si = vol.labels.index(idx[0], idx[1], idx[2]);
                            acc += wgt * vol.image.data()[ch * sv + si] as f64;
                        }
                    }
                    img[ch * pv + dst] = acc as f32;
                }
            }
        }
    }
    Sample {
        image: Tensor::new(vec![c, patch[0], patch[1], patch[2]], img).expect("sized"),
        labels: LabelMap::new(patch, lab).expect("sized"),
    }
}

/// Reverses image and labels along spatial `axis` (0 = D, 1 = H, 2 = W).
pub fn flip(sample: &mut Sample, axis: usize) {
    let s = sample.labels.shape();
    let c = sample.image.shape()[0];
    let vox: usize = s.iter().product();
    let mut perm = Vec::with_capacity(vox);
    for d in 0..s[0] {
        for h in 0..s[1] {
            for w in 0..s[2] {
                let mut p = [d, h, w];
                p[axis] = s[axis] - 1 - p[axis];
                perm.push((p[0] * s[1] + p[1]) * s[2] + p[2]);
            }
        }
    }
    let lab: Vec<u16> = perm.iter().map(|&j| sample.labels.data()[j]).collect();
    sample.labels.data_mut().copy_from_slice(&lab);
    let src = sample.image.data().to_vec();
    let dst = sample.image.data_mut();
    for ch in 0..c {
        for (i, &j) in perm.iter().enumerate() {
            dst[ch * vox + i] = src[ch * vox + j];
        }
    }
}

/// Flips along each axis independently with probability `p`.
pub fn mirror_aug(sample: &mut Sample, p: f64, rng: &mut ChaCha8Rng) {
    for axis in 0..3 {
        if rng.gen_bool(p) {
            flip(sample, axis);
        }
    }
}

/// Adds `delta` to every image value.
pub fn brightness_shift(image: &mut Tensor, delta: f32) {
    for v in image.data_mut() {
        *v += delta;
    }
}

pub fn brightness_aug(sample: &mut Sample, p: f64, std: f64, rng: &mut ChaCha8Rng) {
    if rng.gen_bool(p) {
        let delta = Normal::new(0.0, std).expect("finite std").sample(rng) as f32;
        brightness_shift(&mut sample.image, delta);
    }
}

/// Per channel: min-max normalize to [0, 1], raise to `gamma`, map back to the
/// original range.
pub fn gamma_transform(image: &mut Tensor, gamma: f64) {
    if gamma == 1.0 {
        return;
    }
    let c = image.shape()[0];
    let vox = image.numel() / c;
    for ch in 0..c {
        let x = &mut image.data_mut()[ch * vox..(ch + 1) * vox];
        let (mn, mx) = x.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = (mx - mn) as f64;
        if range <= 0.0 {
            continue;
        }
        for v in x.iter_mut() {
            let n = (*v - mn) as f64 / range;
            *v = (n.powf(gamma) * range + mn as f64) as f32;
        }
    }
}

pub fn gamma_aug(sample: &mut Sample, p: f64, range: [f64; 2], rng: &mut ChaCha8Rng) {
    if rng.gen_bool(p) {
        let g = rng.gen_range(range[0]..=range[1]);
        gamma_transform(&mut sample.image, g);
    }
}
