//! The built-in two-task transfer scenario: pretrain on task A, then fine-tune
//! on task B (novel classes, more input channels) and compare against training
//! task B from scratch. Specs, seeds and thresholds ship in
//! `data/transfer_scenario.json`.

use serde::{Deserialize, Serialize};

use super::infer::{sliding_window_infer, InferOptions};
use super::metrics::evaluate;
use super::synth::{gen_dataset, SynthSpec};
use super::train::{train_with, History, TrainPlan};
use super::volume::Volume;
use crate::arch::{build, ArchConfig, NetworkGraph};
use crate::error::{Error, Result};
use crate::weights::{init_weights, transfer, LrMultiplierMap, WeightStore};

const BUILTIN: &str = include_str!("../../data/transfer_scenario.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub data: SynthSpec,
    pub train_cases: usize,
    pub val_cases: usize,
    pub train_seed: u64,
    pub val_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Preset the toy network is derived from.
    pub base: String,
    /// Every stage width is divided by this.
    pub width_divisor: usize,
    pub patch: [usize; 3],
    pub init_seed: u64,
    pub task_a: TaskSpec,
    pub task_b: TaskSpec,
    pub pretrain: Schedule,
    /// Shared by the fine-tuning and the from-scratch run.
    pub downstream: Schedule,
    /// Mean foreground DSC the pretrained model must reach on task A.
    pub pretrain_dsc: f64,
    /// Task-B validation DSC used to count epochs-to-threshold.
    pub transfer_dsc: f64,
}

/// Outcome of one training run with per-epoch validation.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub store: WeightStore,
    pub history: History,
}

impl RunResult {
    pub fn final_dsc(&self) -> f64 {
        self.history.epochs.last().and_then(|r| r.val_dsc).unwrap_or(0.0)
    }
}

impl Scenario {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("built-in scenario parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.task_a.data.validate()?;
        s.task_b.data.validate()?;
        if s.width_divisor == 0 {
            return Err(Error::config("width_divisor", "must be positive"));
        }
        Ok(s)
    }

    /// Toy network for a task: the base preset with reduced widths and the
    /// task's channel and class counts.
    pub fn config(&self, task: &TaskSpec) -> Result<ArchConfig> {
        let base = ArchConfig::preset(&self.base).ok_or_else(|| Error::config("base", format!("unknown preset {:?}", self.base)))?;
        let cfg = ArchConfig {
            widths: base.widths.iter().map(|w| (w / self.width_divisor).max(1)).collect(),
            in_channels: task.data.channels,
            num_classes: task.data.num_classes(),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn datasets(&self, task: &TaskSpec) -> Result<(Vec<Volume>, Vec<Volume>)> {
        Ok((
            gen_dataset(&task.data, task.train_cases, task.train_seed)?,
            gen_dataset(&task.data, task.val_cases, task.val_seed)?,
        ))
    }

    fn plan(&self, s: Schedule) -> TrainPlan {
        TrainPlan { iters_per_epoch: s.iters_per_epoch, ..TrainPlan::new(s.epochs, self.patch, s.seed) }
    }

    fn run(
        &self,
        graph: &NetworkGraph,
        store: &WeightStore,
        task: &TaskSpec,
        schedule: Schedule,
        lr: Option<&LrMultiplierMap>,
        log: &mut dyn FnMut(usize, f64),
    ) -> Result<RunResult> {
        let (train, val) = self.datasets(task)?;
        let classes: Vec<u16> = (1..task.data.num_classes() as u16).collect();
        let patch = self.patch;
        let mut hook = |epoch: usize, st: &WeightStore| -> Result<Option<f64>> {
            let d = validation_dsc(graph, st, &val, &classes, patch)?;
            log(epoch, d);
            Ok(Some(d))
        };
        let (store, history) = train_with(graph, store, &train, &self.plan(schedule), lr, &Default::default(), &mut hook)?;
        Ok(RunResult { store, history })
    }

    /// Trains the task-A network from a fresh initialization.
    pub fn run_pretrain(&self, log: &mut dyn FnMut(usize, f64)) -> Result<RunResult> {
        let g = build(&self.config(&self.task_a)?)?;
        let init = init_weights(&g, self.init_seed)?;
        self.run(&g, &init, &self.task_a, self.pretrain, None, log)
    }

    /// Transfers `pretrained` to the task-B network and fine-tunes it with
    /// per-parameter learning-rate multipliers.
    pub fn run_finetune(&self, pretrained: &WeightStore, log: &mut dyn FnMut(usize, f64)) -> Result<RunResult> {
        let g = build(&self.config(&self.task_b)?)?;
        let (store, lr) = transfer(pretrained, &g, self.init_seed)?;
        self.run(&g, &store, &self.task_b, self.downstream, Some(&lr), log)
    }

    /// Trains the task-B network from a fresh initialization.
    pub fn run_scratch(&self, log: &mut dyn FnMut(usize, f64)) -> Result<RunResult> {
        let g = build(&self.config(&self.task_b)?)?;
        let init = init_weights(&g, self.init_seed)?;
        self.run(&g, &init, &self.task_b, self.downstream, None, log)
    }
}

/// Mean foreground DSC over `volumes` with sliding-window inference.
pub fn validation_dsc(graph: &NetworkGraph, store: &WeightStore, volumes: &[Volume], classes: &[u16], patch: [usize; 3]) -> Result<f64> {
    if volumes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for v in volumes {
        let pred = sliding_window_infer(graph, store, &v.image, patch, InferOptions::default())?;
        total += evaluate(&pred, &v.labels, classes, None)?.mean_foreground_dsc;
    }
    Ok(total / volumes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenario_is_consistent() {
        let s = Scenario::builtin();
        let a = s.config(&s.task_a).unwrap();
        let b = s.config(&s.task_b).unwrap();
        assert_eq!(a.widths, b.widths);
        assert!(b.in_channels > a.in_channels);
        assert_eq!(s.task_b.data.num_classes(), 4);
        build(&a).unwrap().check_patch(s.patch).unwrap();
    }
}
