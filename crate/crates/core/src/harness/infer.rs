use super::volume::LabelMap;
use crate::arch::{forward, NetworkGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    /// Fraction of the patch shared by neighbouring windows.
    pub overlap: f64,
    /// Gaussian importance weighting (`sigma = patch / 8`); uniform otherwise.
    pub gaussian: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { overlap: 0.5, gaussian: true }
    }
}

pub const GAUSSIAN_SIGMA_FRACTION: f64 = 1.0 / 8.0;

/// Window origins along one axis; the first window starts at 0 and the last ends at `size`.
pub fn window_starts(size: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if size <= patch {
        return vec![0];
    }
    let target_step = (patch as f64 * (1.0 - overlap)).max(1.0);
    let n = ((size - patch) as f64 / target_step).ceil() as usize + 1;
    let step = (size - patch) as f64 / (n - 1) as f64;
    (0..n).map(|i| (step * i as f64).round() as usize).collect()
}

/// Separable Gaussian importance map over a patch, peak 1.
pub fn importance_map(patch: [usize; 3], gaussian: bool) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        if !gaussian {
            return vec![1.0; n];
        }
        let sigma = n as f64 * GAUSSIAN_SIGMA_FRACTION;
        let c = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let peak = a.iter().cloned().fold(0.0, f64::max) * b.iter().cloned().fold(0.0, f64::max) * c.iter().cloned().fold(0.0, f64::max);
    let mut m = Vec::with_capacity(a.len() * b.len() * c.len());
    for &x in &a {
        for &y in &b {
            for &z in &c {
                m.push(x * y * z / peak);
            }
        }
    }
    m
}

/// Tiles `image` (`C, D, H, W`) with overlapping windows, calls `predict` on
/// each `1, C, patch` window and blends the `1, K, patch` logits with the
/// importance map. Axes shorter than the patch are zero-padded symmetrically
/// and cropped back afterwards. Returns the blended `K, D, H, W` logits.
pub fn sliding_window_logits(
    image: &Tensor,
    patch: [usize; 3],
    opts: InferOptions,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected a C,D,H,W image, got {s:?}")));
    }
    if !(0.0..1.0).contains(&opts.overlap) {
        return Err(Error::invalid(format!("overlap {} must lie in [0, 1)", opts.overlap)));
    }
    let c = s[0];
    let orig = [s[1], s[2], s[3]];
    let size = [0, 1, 2].map(|a| orig[a].max(patch[a]));
    let lead = [0, 1, 2].map(|a| (size[a] - orig[a]) / 2);
    let vox: usize = size.iter().product();
    let ovox: usize = orig.iter().product();
    // padded image
    let mut padded = vec![0f32; c * vox];
    for ch in 0..c {
        for d in 0..orig[0] {
            for h in 0..orig[1] {
                let src = ((ch * orig[0] + d) * orig[1] + h) * orig[2];
                let dst = ((ch * size[0] + d + lead[0]) * size[1] + h + lead[1]) * size[2] + lead[2];
                padded[dst..dst + orig[2]].copy_from_slice(&image.data()[src..src + orig[2]]);
            }
        }
    }
    let starts = [0, 1, 2].map(|a| window_starts(size[a], patch[a], opts.overlap));
    let imp = importance_map(patch, opts.gaussian);
    let pv: usize = patch.iter().product();
    let mut acc: Vec<f64> = Vec::new();
    let mut wsum = vec![0f64; vox];
    let mut k = 0;
    let mut window = vec![0f32; c * pv];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                for ch in 0..c {
                    for d in 0..patch[0] {
                        for h in 0..patch[1] {
                            let src = ((ch * size[0] + z0 + d) * size[1] + y0 + h) * size[2] + x0;
                            let dst = ((ch * patch[0] + d) * patch[1] + h) * patch[2];
                            window[dst..dst + patch[2]].copy_from_slice(&padded[src..src + patch[2]]);
                        }
                    }
                }
                let x = Tensor::new(vec![1, c, patch[0], patch[1], patch[2]], window.clone())?;
                let y = predict(&x)?;
                let ys = y.shape();
                if ys.len() != 5 || ys[0] != 1 || ys[2..] != patch {
                    return Err(Error::invalid(format!("window prediction has shape {ys:?}")));
                }
                if acc.is_empty() {
                    k = ys[1];
                    acc = vec![0.0; k * vox];
                }
                for d in 0..patch[0] {
                    for h in 0..patch[1] {
                        for w in 0..patch[2] {
                            let pi = (d * patch[1] + h) * patch[2] + w;
                            let vi = ((z0 + d) * size[1] + y0 + h) * size[2] + x0 + w;
                            let wt = imp[pi];
                            wsum[vi] += wt;
                            for cl in 0..k {
                                acc[cl * vox + vi] += wt * y.data()[cl * pv + pi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0f32; k * ovox];
    for cl in 0..k {
        for d in 0..orig[0] {
            for h in 0..orig[1] {
                for w in 0..orig[2] {
                    let vi = ((d + lead[0]) * size[1] + h + lead[1]) * size[2] + w + lead[2];
                    let oi = (d * orig[1] + h) * orig[2] + w;
                    out[cl * ovox + oi] = (acc[cl * vox + vi] / wsum[vi]) as f32;
                }
            }
        }
    }
    Tensor::new(vec![k, orig[0], orig[1], orig[2]], out)
}

/// Class index of the largest logit per voxel (first wins ties).
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected K,D,H,W logits, got {s:?}")));
    }
    let vox = s[1] * s[2] * s[3];
    let data = (0..vox)
        .map(|i| {
            let mut best = 0;
            for c in 1..s[0] {
                if logits.data()[c * vox + i] > logits.data()[best * vox + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new([s[1], s[2], s[3]], data)
}

/// Segments one image with the network.
pub fn sliding_window_infer(
    graph: &NetworkGraph,
    store: &WeightStore,
    image: &Tensor,
    patch: [usize; 3],
    opts: InferOptions,
) -> Result<LabelMap> {
    graph.check_patch(patch)?;
    let logits = sliding_window_logits(image, patch, opts, |x| forward(graph, store, x))?;
    argmax_labels(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(32, 32, 0.5), vec![0]);
        assert_eq!(window_starts(48, 32, 0.5), vec![0, 16]);
        assert_eq!(window_starts(50, 32, 0.5), vec![0, 9, 18]);
        assert_eq!(window_starts(20, 32, 0.5), vec![0]);
        for size in 32..200 {
            let s = window_starts(size, 32, 0.5);
            assert_eq!(*s.last().unwrap(), size - 32);
            assert!(s.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 16));
        }
    }

    #[test]
    fn constant_logits_give_constant_class() {
        let img = Tensor::zeros(&[1, 40, 37, 33]);
        let logits = sliding_window_logits(&img, [32, 32, 32], InferOptions::default(), |_| {
            Ok(Tensor::from_fn(&[1, 3, 32, 32, 32], |i| if i / 32768 == 2 { 1.0 } else { -1.0 }))
        })
        .unwrap();
        assert!(argmax_labels(&logits).unwrap().data().iter().all(|&v| v == 2));
    }

    #[test]
    fn two_window_blend_matches_hand_computation() {
        // one axis of length 6 with patch 4 and overlap 0.5: windows at 0 and 2
        let patch = [1, 1, 4];
        let img = Tensor::zeros(&[1, 1, 1, 6]);
        let mut calls = 0;
        let logits = sliding_window_logits(&img, patch, InferOptions::default(), |_| {
            calls += 1;
            let v = if calls == 1 { 1.0 } else { 5.0 };
            Ok(Tensor::full(&[1, 1, 1, 1, 4], v))
        })
        .unwrap();
        assert_eq!(calls, 2);
        // sigma = 0.5, center 1.5: tap weights exp(-(i-1.5)^2 / 0.5) normalized to peak 1
        let g: Vec<f64> = (0..4).map(|i: i32| (-((i as f64 - 1.5).powi(2)) / 0.5).exp()).collect();
        let peak = g[1];
        let g: Vec<f64> = g.iter().map(|v| v / peak).collect();
        let expect = [
            1.0,
            1.0,
            (1.0 * g[2] + 5.0 * g[0]) / (g[2] + g[0]),
            (1.0 * g[3] + 5.0 * g[1]) / (g[3] + g[1]),
            5.0,
            5.0,
        ];
        for (a, b) in logits.data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn small_axes_are_padded_and_cropped() {
        let img = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let logits = sliding_window_logits(&img, [4, 4, 4], InferOptions { overlap: 0.5, gaussian: false }, |x| Ok(x.clone())).unwrap();
        assert_eq!(logits.shape(), &[1, 2, 4, 4]);
        assert_eq!(logits.data(), img.data());
    }
}
