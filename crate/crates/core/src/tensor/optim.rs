use indexmap::IndexMap;

use super::{Element, Gradients, Tensor};
use crate::error::{Error, Result};

pub const POLY_EXPONENT: f64 = 0.9;

/// `base * (1 - epoch / total)^0.9`, clamped to zero once `epoch >= total`.
pub fn poly_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 || epoch >= total_epochs {
        return if total_epochs == 0 { base_lr } else { 0.0 };
    }
    base_lr * (1.0 - epoch as f64 / total_epochs as f64).powf(POLY_EXPONENT)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.99, weight_decay: 1e-3 }
    }
}

/// Momentum buffers, one per parameter name.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T: Element = f32> {
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new() -> Self {
        SgdState { buffers: IndexMap::new() }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }
}

/// One SGD step with Nesterov momentum and L2 weight decay:
///
/// ```text
/// d   = g + wd * p
/// buf = momentum * buf + d
/// p  -= lr * scale(name) * (d + momentum * buf)
/// ```
///
/// `lr_scale` supplies the per-parameter learning-rate multiplier.
pub fn sgd_nesterov_step<T: Element>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &Gradients<T>,
    lr: f64,
    cfg: &SgdConfig,
    state: &mut SgdState<T>,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    let m = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingParameters(vec![format!("gradient for {name}")]))?;
        if g.shape() != p.shape() {
            return Err(Error::invalid(format!("gradient for {name} has shape {:?}", g.shape())));
        }
        let step_lr = T::from_f64(lr * lr_scale(name));
        let buf = state.buffers.entry(name.clone()).or_insert_with(|| p.zeros_like());
        for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            let d = gv + wd * *pv;
            *bv = m * *bv + d;
            *pv = *pv - step_lr * (d + m * *bv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: Vec<f64>) -> IndexMap<String, Tensor<f64>> {
        let n = v.len();
        IndexMap::from([(name.to_string(), Tensor::new(vec![n], v).unwrap())])
    }

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(0, 1000, 0.01), 0.01);
        assert_eq!(poly_lr(1000, 1000, 0.01), 0.0);
        let mid = poly_lr(500, 1000, 0.01);
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.005359).abs() < 5e-7);
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = poly_lr(e, 100, 0.01);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let mut p = single("w", vec![1.0, -2.0]);
        let g = single("w", vec![0.5, 0.25]);
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0 };
        sgd_nesterov_step(&mut p, &g, 0.1, &cfg, &mut SgdState::new(), |_| 1.0).unwrap();
        assert_eq!(p["w"].data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn pure_decay_shrinks_magnitude() {
        let mut p = single("w", vec![3.0, -1.5]);
        let g = single("w", vec![0.0, 0.0]);
        let cfg = SgdConfig::default();
        let mut st = SgdState::new();
        for _ in 0..3 {
            let before: Vec<f64> = p["w"].data().iter().map(|v| v.abs()).collect();
            sgd_nesterov_step(&mut p, &g, 0.01, &cfg, &mut st, |_| 1.0).unwrap();
            for (a, b) in p["w"].data().iter().zip(before) {
                assert!(a.abs() < b);
            }
        }
    }

    #[test]
    fn two_nesterov_steps_match_hand_unrolled_recurrence() {
        // constant gradient g, no decay, momentum m:
        // step 1: buf1 = g,        p1 = p0 - lr (g + m g)
        // step 2: buf2 = m g + g,  p2 = p1 - lr (g + m (m g + g))
        let (p0, g, lr, m) = (1.0f64, 0.2, 0.05, 0.99);
        let mut p = single("w", vec![p0]);
        let grads = single("w", vec![g]);
        let cfg = SgdConfig { momentum: m, weight_decay: 0.0 };
        let mut st = SgdState::new();
        sgd_nesterov_step(&mut p, &grads, lr, &cfg, &mut st, |_| 1.0).unwrap();
        let p1 = p0 - lr * (g + m * g);
        assert!((p["w"].data()[0] - p1).abs() < 1e-15);
        sgd_nesterov_step(&mut p, &grads, lr, &cfg, &mut st, |_| 1.0).unwrap();
        let p2 = p1 - lr * (g + m * (m * g + g));
        assert!((p["w"].data()[0] - p2).abs() < 1e-15);
        assert!((st.buffer("w").unwrap().data()[0] - (m * g + g)).abs() < 1e-15);
    }

    #[test]
    fn zero_multiplier_freezes_parameters() {
        let mut p = single("w", vec![0.7, -0.3]);
        let g = single("w", vec![5.0, -2.0]);
        sgd_nesterov_step(&mut p, &g, 0.01, &SgdConfig::default(), &mut SgdState::new(), |_| 0.0).unwrap();
        assert_eq!(p["w"].data(), &[0.7, -0.3]);
    }
}
