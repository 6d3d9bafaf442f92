//! AdamW training with linear warmup, cosine decay and global-norm clipping.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::save_checkpoint;
use super::{MaskedSeqModel, ModelConfig, ModelError};
use crate::codec::{training_batch, WindowSpec};
use crate::dataset::Dataset;
use crate::rng::stream_seed;

/// Cosine decay bottoms out at this fraction of the peak rate.
const LR_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub dropout: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub max_epochs: usize,
    pub ctx_len: usize,
    pub horizon: usize,
    /// Upper bound on grid width/height the model must handle.
    pub grid: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 3,
            heads: 4,
            embed_dim: 128,
            batch: 64,
            lr: 6e-4,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            dropout: 0.1,
            grad_clip: 1.0,
            weight_decay: 0.1,
            warmup_frac: 0.05,
            max_epochs: 200,
            ctx_len: 0,
            horizon: 5,
            grid: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.batch == 0 || self.max_epochs == 0 || self.horizon == 0 {
            return bad("batch, max_epochs and horizon must be positive");
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0 && self.adam_eps > 0.0) {
            return bad("lr, grad_clip and adam_eps must be positive");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("weight_decay must be non-negative and warmup_frac in [0, 1)");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            embed_dim: self.embed_dim,
            ff_mult: 4,
            max_len: self.ctx_len + self.horizon,
            grid: self.grid,
            dropout: self.dropout,
        }
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            ctx_len: self.ctx_len,
            horizon: self.horizon,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// One epoch visits as many examples as the dataset has actions.
    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        dataset.action_count().div_ceil(self.batch).max(1)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total: usize) -> LrSchedule {
        LrSchedule {
            peak,
            warmup: (warmup_frac * total as f64).ceil() as usize,
            total,
        }
    }

    /// Rate for zero-based step `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * cosine.max(LR_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean training-batch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

/// Train a freshly initialized model; weights are seeded from `seed`.
pub fn train_new(
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(MaskedSeqModel<f32>, TrainOutcome), ModelError> {
    cfg.validate()?;
    let mut model = MaskedSeqModel::new(cfg.model_config(), stream_seed(seed, 0))?;
    let outcome = train(&mut model, dataset, cfg, seed, checkpoint_dir)?;
    Ok((model, outcome))
}

/// Run `cfg.max_epochs` epochs of masked-action training in place.
///
/// On a non-finite loss, gradient or parameter the model is rolled back to
/// the end of the last finished epoch, saved as `last_good.ckpt` when a
/// checkpoint directory is given, and `NonFiniteLoss` is returned.
pub fn train(
    model: &mut MaskedSeqModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let mcfg = model.config();
    if mcfg.max_len < cfg.ctx_len + cfg.horizon || mcfg.grid < cfg.grid {
        return Err(ModelError::DimMismatch {
            expected: cfg.model_config().describe(),
            found: mcfg.describe(),
        });
    }
    if dataset.action_count() == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let digest = cfg.digest();
    let steps_per_epoch = cfg.steps_per_epoch(dataset);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_frac, steps_per_epoch * cfg.max_epochs);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2));

    let n = model.param_count();
    let decay: Vec<bool> = {
        let mut d = vec![false; n];
        for e in model.entries() {
            d[e.range()].fill(e.decay);
        }
        d
    };
    let mut grad = vec![0f32; n];
    let mut m1 = vec![0f32; n];
    let mut m2 = vec![0f32; n];
    let mut last_good = model.params().to_vec();
    let (b1, b2) = cfg.betas;
    let mut curve = Vec::with_capacity(cfg.max_epochs);
    let mut step = 0usize;

    let abort = |model: &mut MaskedSeqModel<f32>,
                 last_good: &[f32],
                 epoch: usize,
                 step: usize|
     -> Result<TrainOutcome, ModelError> {
        model.params_mut().copy_from_slice(last_good);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(model, &digest, epoch, &dir.join("last_good.ckpt"))?;
        }
        Err(ModelError::NonFiniteLoss { epoch, step })
    };

    for epoch in 0..cfg.max_epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = training_batch(dataset, cfg.batch, cfg.window(), &mut batch_rng)
                .map_err(|_| ModelError::EmptyDataset)?;
            grad.fill(0.0);
            let loss = model.loss_and_grad(&batch, &mut grad, Some(&mut drop_rng));
            let norm = grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return abort(model, &last_good, epoch, step);
            }
            let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            let lr = schedule.at(step);
            let t = (step + 1) as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let theta = model.params_mut();
            for i in 0..n {
                let g = grad[i] as f64 * clip;
                let a = b1 * m1[i] as f64 + (1.0 - b1) * g;
                let v = b2 * m2[i] as f64 + (1.0 - b2) * g * g;
                m1[i] = a as f32;
                m2[i] = v as f32;
                let mut p = theta[i] as f64;
                if decay[i] {
                    p *= 1.0 - lr * cfg.weight_decay;
                }
                p -= lr * (a / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
                theta[i] = p as f32;
            }
            total += loss;
            step += 1;
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return abort(model, &last_good, epoch, step);
        }
        last_good.copy_from_slice(model.params());
        curve.push(total / steps_per_epoch as f64);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &digest, epoch + 1, &dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(TrainOutcome {
        loss_curve: curve,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::EnvSpec;
    use crate::oracle::generate_dataset;

    pub(crate) fn small_cfg() -> TrainConfig {
        TrainConfig {
            layers: 1,
            heads: 2,
            embed_dim: 32,
            batch: 16,
            lr: 3e-3,
            dropout: 0.0,
            max_epochs: 4,
            grid: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays_to_floor() {
        let s = LrSchedule::new(1.0, 0.05, 1000);
        assert_eq!(s.warmup, 50);
        assert!((s.at(0) - 0.02).abs() < 1e-12);
        assert!((s.at(49) - 1.0).abs() < 1e-12);
        let mut prev = s.at(50);
        for t in 51..1000 {
            assert!(s.at(t) <= prev + 1e-15);
            prev = s.at(t);
        }
        assert!((s.at(999) - LR_FLOOR).abs() < 1e-9);
    }

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.layers, c.heads, c.embed_dim, c.batch), (3, 4, 128, 64));
        assert_eq!(c.lr, 6e-4);
        assert_eq!(c.betas, (0.9, 0.95));
        assert_eq!((c.dropout, c.grad_clip, c.weight_decay), (0.1, 1.0, 0.1));
        assert_eq!(c.max_epochs, 200);
        assert!(c.validate().is_ok());
        assert_ne!(c.digest(), small_cfg().digest());
    }

    #[test]
    fn same_seed_same_run() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 20, 0.0, 3).unwrap();
        let cfg = TrainConfig {
            dropout: 0.1,
            ..small_cfg()
        };
        let (a, oa) = train_new(&ds, &cfg, 7, None).unwrap();
        let (b, ob) = train_new(&ds, &cfg, 7, None).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.params(), b.params());
        let (_, oc) = train_new(&ds, &cfg, 8, None).unwrap();
        assert_ne!(oa.loss_curve, oc.loss_curve);
    }

    #[test]
    fn divergence_rolls_back_and_saves() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&EnvSpec::local_7x7(), 10, 0.0, 3).unwrap();
        let cfg = TrainConfig {
            lr: 1e38,
            warmup_frac: 0.0,
            ..small_cfg()
        };
        let mut model = MaskedSeqModel::new(cfg.model_config(), 0).unwrap();
        let before = model.params().to_vec();
        let err = train(&mut model, &ds, &cfg, 0, Some(dir.path())).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteLoss { epoch: 0, .. }));
        assert_eq!(model.params(), &before[..]);
        assert!(dir.path().join("last_good.ckpt").exists());
    }

    #[test]
    fn checkpoints_follow_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&EnvSpec::local_7x7(), 5, 0.0, 3).unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..small_cfg()
        };
        train_new(&ds, &cfg, 1, Some(dir.path())).unwrap();
        assert!(dir.path().join("epoch_0002.ckpt").exists());
        assert!(dir.path().join("epoch_0004.ckpt").exists());
        assert!(!dir.path().join("epoch_0001.ckpt").exists());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = EnvSpec {
            width: 3,
            height: 3,
            obstacles: 0,
            agent: Some(crate::gridworld::Pose::new(1, 1, crate::gridworld::Dir::N)),
            goal: Some((1, 1)),
            ..EnvSpec::default()
        };
        let ds = generate_dataset(&spec, 2, 0.0, 0).unwrap();
        assert!(matches!(
            train_new(&ds, &small_cfg(), 0, None),
            Err(ModelError::EmptyDataset)
        ));
    }
}
