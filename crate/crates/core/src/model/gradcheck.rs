//! Central finite-difference check of the analytic MLM-loss gradient.

use super::{MaskedSeqModel, ModelError};
use crate::codec::TrainExample;

/// Gradients below this magnitude are compared absolutely rather than
/// relatively, so round-off on near-zero coordinates does not dominate.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index within it of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates where both gradients are exactly zero.
    pub exact_zeros: usize,
}

pub fn grad_check(
    model: &MaskedSeqModel<f64>,
    batch: &[TrainExample],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, ModelError> {
    grad_check_with(model, batch, epsilon, tolerance, |_| {})
}

/// As [`grad_check`], with `tamper` applied to the analytic gradient before
/// comparison (used to confirm that a broken backward pass is caught).
pub fn grad_check_with(
    model: &MaskedSeqModel<f64>,
    batch: &[TrainExample],
    epsilon: f64,
    tolerance: f64,
    tamper: impl FnOnce(&mut [f64]),
) -> Result<GradCheckReport, ModelError> {
    let mut analytic = vec![0.0; model.param_count()];
    model.loss_and_grad(batch, &mut analytic, None);
    tamper(&mut analytic);

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        exact_zeros: 0,
    };
    let mut first_failure = None;
    for e in model.entries() {
        for (k, i) in e.range().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + epsilon;
            let up = probe.loss(batch);
            probe.params_mut()[i] = orig - epsilon;
            let down = probe.loss(batch);
            probe.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i];
            report.checked += 1;
            if a == 0.0 && numeric == 0.0 {
                report.exact_zeros += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((e.name.clone(), k));
            }
            if rel > tolerance && first_failure.is_none() {
                first_failure = Some(ModelError::GradMismatch {
                    tensor: e.name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                    tolerance,
                });
            }
        }
    }
    match first_failure {
        Some(err) => Err(err),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{training_batch, WindowSpec};
    use crate::gridworld::EnvSpec;
    use crate::model::ModelConfig;
    use crate::oracle::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MaskedSeqModel<f64>, Vec<TrainExample>) {
        let spec = EnvSpec {
            width: 5,
            height: 5,
            obstacles: 1,
            ..EnvSpec::default()
        };
        let ds = generate_dataset(&spec, 6, 0.0, 11).unwrap();
        let w = WindowSpec { ctx_len: 1, horizon: 3 };
        let batch = training_batch(&ds, 3, w, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (MaskedSeqModel::new(ModelConfig::tiny(4, 5), 17).unwrap(), batch)
    }

    #[test]
    fn analytic_matches_numeric() {
        let (m, batch) = setup();
        let r = grad_check(&m, &batch, 1e-4, 1e-3).unwrap();
        assert_eq!(r.checked, m.param_count());
        assert!(r.max_rel_err < 1e-3, "{r:?}");
        // Unused embedding rows have zero gradient both ways.
        assert!(r.exact_zeros > 0);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let (m, batch) = setup();
        let head = m.entries().iter().find(|e| e.name == "head.b").unwrap().offset;
        let err = grad_check_with(&m, &batch, 1e-4, 1e-3, |g| g[head] *= 1.5).unwrap_err();
        assert!(matches!(err, ModelError::GradMismatch { ref tensor, .. } if tensor == "head.b"));
    }
}
