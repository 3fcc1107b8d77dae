//! Two-stage training: causal next-token pre-training and bidirectional
//! energy/force fine-tuning, with evaluation and checkpoints.

mod checkpoint;
mod eval;
mod loops;
mod reference;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, Checkpoint, CheckpointHeader,
};
pub use eval::{
    cross_entropy_loss, evaluate, metrics_from_predictions, EvalMetrics, EVAL_CHUNK,
};
pub use loops::{
    finetune, finetune_loss, fit_calibration, pretrain, pretrain_loss, TrainReport, TrainingSet,
};
pub use reference::{fit_energy_reference, EnergyReference};

use crate::codebook::CodebookError;
use crate::model::ModelError;
use crate::nn::NnError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("frame {frame} lacks energy/force labels")]
    MissingLabels { frame: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("codebook hash mismatch: checkpoint {expected}, supplied {found}")]
    CodebookMismatch { expected: String, found: String },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub lambda_energy: f64,
    pub lambda_force: f64,
    pub seed: u64,
    pub rotation_augment: bool,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Refit energy reference and head scales from the training frames
    /// before fine-tuning.
    pub fit_calibration: bool,
}

impl TrainConfig {
    /// Reference hyperparameters with desk-scale batch size and epoch counts.
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            peak_lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 10,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            lambda_energy: 1.0,
            lambda_force: 1.0,
            seed: 0,
            rotation_augment: true,
            max_steps: None,
            fit_calibration: true,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 60,
            warmup_fraction: 0.10,
            clip_norm: 100.0,
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.peak_lr >= 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("peak_lr, weight_decay must be >= 0 and clip_norm > 0");
        }
        if !(self.lambda_energy >= 0.0) || !(self.lambda_force >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        Ok(())
    }

    /// Steps for `n_frames` training frames, honouring `max_steps`.
    pub fn total_steps(&self, n_frames: usize) -> usize {
        let per_epoch = n_frames.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
pub fn lr_schedule(
    step: usize,
    total: usize,
    warmup_fraction: f64,
    peak: f64,
) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total {
        return Err(TrainError::InvalidArgument(format!(
            "step {step} beyond total {total}"
        )));
    }
    let warmup = (warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    Ok(0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Skip-and-halve protocol for non-finite steps: after `limit` skips within
/// `window` steps the learning rate multiplier is halved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityGuard {
    pub window: usize,
    pub limit: usize,
    pub lr_multiplier: f64,
    pub total_skips: usize,
    pub halvings: usize,
    recent: Vec<usize>,
}

impl Default for InstabilityGuard {
    fn default() -> Self {
        Self {
            window: 100,
            limit: 3,
            lr_multiplier: 1.0,
            total_skips: 0,
            halvings: 0,
            recent: Vec::new(),
        }
    }
}

impl InstabilityGuard {
    /// Record a skipped step; returns true when the rate was halved.
    pub fn record_skip(&mut self, step: usize) -> bool {
        self.total_skips += 1;
        self.recent.push(step);
        let window = self.window;
        self.recent.retain(|&s| s + window > step);
        if self.recent.len() >= self.limit {
            self.lr_multiplier *= 0.5;
            self.halvings += 1;
            self.recent.clear();
            return true;
        }
        false
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub skips: usize,
}

pub fn write_metrics_csv<W: Write>(mut w: W, history: &[StepRecord]) -> std::io::Result<()> {
    writeln!(w, "step,lr,loss,grad_norm,skips")?;
    for r in history {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{}",
            r.step, r.lr, r.loss, r.grad_norm, r.skips
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let total = 1000;
        assert_eq!(lr_schedule(0, total, 0.1, 3e-4).unwrap(), 0.0);
        assert!((lr_schedule(100, total, 0.1, 3e-4).unwrap() - 3e-4).abs() < 1e-18);
        assert!(lr_schedule(total, total, 0.1, 3e-4).unwrap().abs() < 1e-12);
        assert!(lr_schedule(0, 0, 0.1, 1.0).is_err());
        let mid = lr_schedule(550, total, 0.1, 1.0).unwrap();
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 50..=500 {
            let lr = lr_schedule(s, 500, 0.1, 1.0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn table_defaults() {
        let p = TrainConfig::pretrain();
        assert_eq!((p.peak_lr, p.weight_decay, p.warmup_fraction, p.clip_norm, p.epochs), (3e-4, 0.0, 0.05, 1.0, 10));
        let f = TrainConfig::finetune();
        assert_eq!((f.peak_lr, f.weight_decay, f.warmup_fraction, f.clip_norm, f.epochs), (3e-4, 1e-3, 0.10, 100.0, 60));
        assert_eq!(f.epochs / p.epochs, 6);
    }

    #[test]
    fn guard_halves_after_three_skips_in_window() {
        let mut g = InstabilityGuard::default();
        assert!(!g.record_skip(10));
        assert!(!g.record_skip(150));
        assert!(!g.record_skip(160));
        assert!(g.record_skip(200));
        assert_eq!(g.lr_multiplier, 0.5);
        assert_eq!(g.total_skips, 4);
    }

    #[test]
    fn total_steps_respects_cap() {
        let mut c = TrainConfig::finetune();
        c.batch_size = 16;
        c.epochs = 3;
        assert_eq!(c.total_steps(33), 9);
        c.max_steps = Some(5);
        assert_eq!(c.total_steps(33), 5);
    }

    #[test]
    fn metrics_csv_header() {
        let mut out = Vec::new();
        let rec = StepRecord {
            step: 1,
            lr: 1e-3,
            loss: 2.0,
            grad_norm: 0.5,
            skips: 0,
        };
        write_metrics_csv(&mut out, &[rec]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("step,lr,loss,grad_norm,skips\n1,"));
    }
}
