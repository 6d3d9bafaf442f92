//! Masked action models: the transformer, a count-based tabular stand-in,
//! and the shared query interface the energy and planners consume.

mod checkpoint;
mod features;
mod gradcheck;
pub mod linalg;
mod tabular;
mod train;
mod transformer;

use thiserror::Error;

use crate::codec::{MaskPattern, TokenSeq, TrainExample};

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use tabular::{fit_tabular, TabKey, TabularModel};
pub use train::{train, train_new, LrSchedule, TrainConfig, TrainOutcome};
pub use transformer::{MaskedSeqModel, ModelConfig, ParamEntry};

/// Distribution over the four real actions, indexed by token code.
pub type ActionDist = [f64; 4];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("gradient mismatch in {tensor}[{index}]: analytic {analytic:e}, numeric {numeric:e} (rel. error {rel_err:e} > {tolerance:e})")]
    GradMismatch {
        tensor: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
        tolerance: f64,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("smoothing constant must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("dataset has no usable demonstrations")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint dims {found} do not match model dims {expected}")]
    DimMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One marginal query: a sequence and the positions to read out.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub seq: &'a TokenSeq,
    pub positions: &'a [usize],
}

/// Anything that yields per-position action distributions for masked slots.
///
/// Queried positions are expected to hold `MASK`; implementations do not
/// check. Returned distributions cover the four real actions only.
pub trait ActionModel: Send + Sync {
    fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>>;

    fn marginals(&self, seq: &TokenSeq, positions: &MaskPattern) -> Vec<ActionDist> {
        self.marginals_batch(&[Query {
            seq,
            positions: positions.indices(),
        }])
        .pop()
        .unwrap_or_default()
    }
}

impl<M: ActionModel + ?Sized> ActionModel for &M {
    fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>> {
        (**self).marginals_batch(queries)
    }
}

impl<M: ActionModel + ?Sized> ActionModel for std::sync::Arc<M> {
    fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>> {
        (**self).marginals_batch(queries)
    }
}

/// Uniform over the four actions everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformModel;

impl ActionModel for UniformModel {
    fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>> {
        queries
            .iter()
            .map(|q| vec![[0.25; 4]; q.positions.len()])
            .collect()
    }
}

/// Softmax of four logits in `f64`.
pub fn softmax4(logits: [f64; 4]) -> ActionDist {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

/// Mean negative log-likelihood of the masked targets.
pub fn mlm_loss<M: ActionModel + ?Sized>(model: &M, batch: &[TrainExample]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let positions: Vec<[usize; 1]> = batch.iter().map(|ex| [ex.position]).collect();
    let queries: Vec<Query> = batch
        .iter()
        .zip(&positions)
        .map(|(ex, p)| Query {
            seq: &ex.seq,
            positions: p,
        })
        .collect();
    let dists = model.marginals_batch(&queries);
    let mut total = 0.0;
    for (ex, d) in batch.iter().zip(dists) {
        let idx = ex.target.vocab_index().expect("training targets are planning actions");
        total -= d[0][idx].ln();
    }
    let loss = total / batch.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFiniteLoss { epoch: 0, step: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{training_batch, Token, WindowSpec};
    use crate::gridworld::EnvSpec;
    use crate::oracle::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Puts all mass on whatever action the slot held before masking.
    struct Peek<'a>(&'a [TrainExample]);

    impl ActionModel for Peek<'_> {
        fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>> {
            queries
                .iter()
                .zip(self.0)
                .map(|(_, ex)| {
                    let mut d = [0.0; 4];
                    d[Token::from(ex.target).code() as usize] = 1.0;
                    vec![d]
                })
                .collect()
        }
    }

    fn batch() -> Vec<TrainExample> {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 10, 0.0, 2).unwrap();
        let w = WindowSpec { ctx_len: 0, horizon: 5 };
        training_batch(&ds, 16, w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn uniform_loss_is_ln4() {
        let b = batch();
        let loss = mlm_loss(&UniformModel, &b).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_model_has_zero_loss() {
        let b = batch();
        assert_eq!(mlm_loss(&Peek(&b), &b).unwrap(), 0.0);
    }

    #[test]
    fn softmax_normalizes() {
        let d = softmax4([1000.0, -3.0, 0.5, 2.0]);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(softmax4([0.0; 4]), [0.25; 4]);
    }
}
