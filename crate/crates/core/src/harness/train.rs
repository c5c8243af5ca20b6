use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{brightness_aug, crop, gamma_aug, mirror_aug, scaled_crop, AugmentParams, Sample};
use super::volume::{LabelMap, Volume};
use crate::arch::{forward_tape, NetworkGraph};
use crate::error::{Error, Result};
use crate::tensor::kernels::one_hot;
use crate::tensor::{poly_lr, sgd_nesterov_step, SgdConfig, SgdState, Tape, Tensor, Var};
use crate::weights::{LrMultiplierMap, WeightStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    #[serde(default = "d_iters")]
    pub iters_per_epoch: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    pub patch: [usize; 3],
    #[serde(default = "d_true")]
    pub mirror: bool,
    #[serde(default = "d_true")]
    pub brightness: bool,
    #[serde(default = "d_true")]
    pub gamma_aug: bool,
    #[serde(default = "d_true")]
    pub scaling_aug: bool,
    #[serde(default)]
    pub seed: u64,
}

fn d_iters() -> usize {
    250
}
fn d_batch() -> usize {
    2
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.99
}
fn d_wd() -> f64 {
    1e-3
}
fn d_true() -> bool {
    true
}

impl TrainPlan {
    pub fn new(epochs: usize, patch: [usize; 3], seed: u64) -> Self {
        TrainPlan {
            epochs,
            iters_per_epoch: d_iters(),
            batch_size: d_batch(),
            base_lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            patch,
            mirror: true,
            brightness: true,
            gamma_aug: true,
            scaling_aug: true,
            seed,
        }
    }

    pub fn validate(&self, graph: &NetworkGraph) -> Result<()> {
        if self.iters_per_epoch == 0 {
            return Err(Error::config("iters_per_epoch", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        graph.check_patch(self.patch).map_err(|e| Error::config("patch", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_loss,val_dsc\n");
        for r in &self.epochs {
            let v = r.val_dsc.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.8e},{:.6},{}\n", r.epoch, r.lr, r.mean_loss, v));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.mean_loss).collect()
    }

    /// First epoch (1-based count) whose validation DSC reaches `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().position(|r| r.val_dsc.is_some_and(|d| d >= threshold)).map(|i| i + 1)
    }
}

/// Relative weight of each head's loss: `1/2^i`, normalized to sum 1.
pub fn deep_supervision_weights(heads: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..heads).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Voxel positions of each foreground class, used for foreground-forced sampling.
struct ForegroundIndex {
    per_class: Vec<Vec<usize>>,
}

impl ForegroundIndex {
    fn new(labels: &LabelMap) -> Self {
        let k = labels.max_label() as usize + 1;
        let mut per_class = vec![Vec::new(); k];
        for (i, &l) in labels.data().iter().enumerate() {
            if l > 0 {
                per_class[l as usize].push(i);
            }
        }
        per_class.retain(|v| !v.is_empty());
        ForegroundIndex { per_class }
    }
}

fn draw_sample(vol: &Volume, fg: &ForegroundIndex, force_fg: bool, plan: &TrainPlan, aug: &AugmentParams, rng: &mut ChaCha8Rng) -> Sample {
    let ext = vol.spatial();
    let p = plan.patch;
    let mut origin = [0isize; 3];
    if force_fg && !fg.per_class.is_empty() {
        let cls = &fg.per_class[rng.gen_range(0..fg.per_class.len())];
        let v = cls[rng.gen_range(0..cls.len())];
        let pos = [v / (ext[1] * ext[2]), (v / ext[2]) % ext[1], v % ext[2]];
        for a in 0..3 {
            let want = pos[a] as isize - (p[a] / 2) as isize;
            let hi = (ext[a] as isize - p[a] as isize).max(0);
            origin[a] = if ext[a] >= p[a] { want.clamp(0, hi) } else { -(((p[a] - ext[a]) / 2) as isize) };
        }
    } else {
        for a in 0..3 {
            origin[a] = if ext[a] >= p[a] {
                rng.gen_range(0..=ext[a] - p[a]) as isize
            } else {
                -(((p[a] - ext[a]) / 2) as isize)
            };
        }
    }
    let mut s = if plan.scaling_aug && rng.gen_bool(aug.scaling_prob) {
        let scale = rng.gen_range(aug.scaling_range[0]..=aug.scaling_range[1]);
        let center = [0, 1, 2].map(|a| origin[a] as f64 + (p[a] as f64 - 1.0) / 2.0);
        scaled_crop(vol, center, p, scale)
    } else {
        crop(vol, origin, p)
    };
    if plan.mirror {
        mirror_aug(&mut s, aug.mirror_prob, rng);
    }
    if plan.brightness {
        brightness_aug(&mut s, aug.brightness_prob, aug.brightness_std, rng);
    }
    if plan.gamma_aug {
        gamma_aug(&mut s, aug.gamma_prob, aug.gamma_range, rng);
    }
    s
}

/// Nearest (strided) down-sampling of `N` stacked label maps.
fn downsample_labels(labels: &[usize], n: usize, ext: [usize; 3], f: [usize; 3]) -> Vec<usize> {
    let o = [ext[0] / f[0], ext[1] / f[1], ext[2] / f[2]];
    let vin = ext[0] * ext[1] * ext[2];
    let mut out = Vec::with_capacity(n * o[0] * o[1] * o[2]);
    for s in 0..n {
        for d in 0..o[0] {
            for h in 0..o[1] {
                for w in 0..o[2] {
                    out.push(labels[s * vin + ((d * f[0]) * ext[1] + h * f[1]) * ext[2] + w * f[2]]);
                }
            }
        }
    }
    out
}

/// Weighted Dice + CE over all heads. Returns the loss var and the unweighted
/// `(dice, ce)` of the segmentation head.
fn supervised_loss(
    tape: &mut Tape,
    graph: &NetworkGraph,
    heads: &[Var],
    labels: &[usize],
    n: usize,
    patch: [usize; 3],
) -> Result<(Var, f64, f64)> {
    let classes = graph.config().num_classes;
    let ratios = &graph.config().updown_ratios;
    let weights = deep_supervision_weights(heads.len());
    let mut total: Option<Var> = None;
    let (mut dice0, mut ce0) = (0.0, 0.0);
    for (i, (&h, &wgt)) in heads.iter().zip(&weights).enumerate() {
        let mut f = [1usize; 3];
        for r in ratios.iter().take(i) {
            for a in 0..3 {
                f[a] *= r[a];
            }
        }
        let lab = if i == 0 { labels.to_vec() } else { downsample_labels(labels, n, patch, f) };
        let sp = [patch[0] / f[0], patch[1] / f[1], patch[2] / f[2]];
        let target = one_hot::<f32>(&lab, n, classes, &sp)?;
        let prob = tape.softmax_channels(h)?;
        let dice = tape.soft_dice_loss(prob, target)?;
        let ce = tape.cross_entropy(prob, lab)?;
        if i == 0 {
            dice0 = tape.value(dice).data()[0] as f64;
            ce0 = tape.value(ce).data()[0] as f64;
        }
        let both = tape.add(dice, ce)?;
        let term = tape.scale(both, wgt);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok((total.expect("at least one head"), dice0, ce0))
}

/// Validation hook called after every epoch with the current weights; its
/// return value is recorded as that epoch's `val_dsc`.
pub type EpochHook<'a> = dyn FnMut(usize, &WeightStore) -> Result<Option<f64>> + 'a;

/// Patch-based SGD training. Deterministic for a given plan seed.
pub fn train(
    graph: &NetworkGraph,
    store: &WeightStore,
    dataset: &[Volume],
    plan: &TrainPlan,
    lr_multipliers: Option<&LrMultiplierMap>,
) -> Result<(WeightStore, History)> {
    train_with(graph, store, dataset, plan, lr_multipliers, &AugmentParams::default(), &mut |_, _| Ok(None))
}

pub fn train_with(
    graph: &NetworkGraph,
    store: &WeightStore,
    dataset: &[Volume],
    plan: &TrainPlan,
    lr_multipliers: Option<&LrMultiplierMap>,
    aug: &AugmentParams,
    on_epoch: &mut EpochHook<'_>,
) -> Result<(WeightStore, History)> {
    plan.validate(graph)?;
    store.check_graph(graph, true)?;
    if plan.epochs > 0 && dataset.is_empty() {
        return Err(Error::invalid("training needs at least one volume"));
    }
    let cfg = graph.config();
    for (i, v) in dataset.iter().enumerate() {
        if v.channels() != cfg.in_channels {
            return Err(Error::invalid(format!("volume {i} has {} channels, network expects {}", v.channels(), cfg.in_channels)));
        }
        if v.labels.max_label() as usize >= cfg.num_classes {
            return Err(Error::invalid(format!("volume {i} has label {} but the network has {} classes", v.labels.max_label(), cfg.num_classes)));
        }
    }
    let fg: Vec<ForegroundIndex> = dataset.iter().map(|v| ForegroundIndex::new(&v.labels)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let sgd = SgdConfig { momentum: plan.momentum, weight_decay: plan.weight_decay };
    let mut state = SgdState::new();
    let mut params = store.clone().into_map();
    let digest = store.config_digest().map(String::from);
    let mut history = History::default();
    let n = plan.batch_size;
    let patch = plan.patch;
    let c = cfg.in_channels;
    let pv: usize = patch.iter().product();
    let mut iteration = 0;
    for epoch in 0..plan.epochs {
        let lr = poly_lr(epoch, plan.epochs, plan.base_lr);
        let mut loss_sum = 0.0;
        for _ in 0..plan.iters_per_epoch {
            let mut img = Vec::with_capacity(n * c * pv);
            let mut labels = Vec::with_capacity(n * pv);
            for b in 0..n {
                let vi = rng.gen_range(0..dataset.len());
                let s = draw_sample(&dataset[vi], &fg[vi], b + 1 == n, plan, aug, &mut rng);
                img.extend_from_slice(s.image.data());
                labels.extend(s.labels.data().iter().map(|&l| l as usize));
            }
            let x = Tensor::new(vec![n, c, patch[0], patch[1], patch[2]], img)?;
            let current = WeightStore::from_map(std::mem::take(&mut params));
            let mut tape = Tape::new();
            let heads = forward_tape(graph, &current, &x, &mut tape);
            params = current.into_map();
            let heads = heads?;
            let (loss, dice, ce) = supervised_loss(&mut tape, graph, &heads, &labels, n, patch)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, lr, dice, ce });
            }
            let grads = tape.backward(loss)?;
            drop(tape);
            sgd_nesterov_step(&mut params, &grads, lr, &sgd, &mut state, |name| {
                lr_multipliers.map_or(1.0, |m| m.get(name))
            })?;
            loss_sum += lv;
            iteration += 1;
        }
        let mut snapshot = WeightStore::from_map(params.clone());
        snapshot.set_config_digest(digest.clone());
        let val = on_epoch(epoch, &snapshot)?;
        history.epochs.push(EpochRecord { epoch, lr, mean_loss: loss_sum / plan.iters_per_epoch as f64, val_dsc: val });
    }
    let mut out = WeightStore::from_map(params);
    out.set_config_digest(digest);
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supervision_weights_halve_and_normalize() {
        let w = deep_supervision_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
        assert_eq!(deep_supervision_weights(1), vec![1.0]);
    }

    #[test]
    fn strided_label_downsampling() {
        let labels: Vec<usize> = (0..16).collect();
        assert_eq!(downsample_labels(&labels, 1, [1, 4, 4], [1, 2, 2]), vec![0, 2, 8, 10]);
    }

    #[test]
    fn csv_columns() {
        let h = History { epochs: vec![EpochRecord { epoch: 0, lr: 0.01, mean_loss: 1.5, val_dsc: None }] };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,lr,mean_loss,val_dsc\n0,"));
        assert!(csv.trim_end().ends_with(','));
    }
}
