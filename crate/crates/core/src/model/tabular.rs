//! Smoothed count table behind the same interface as the transformer.
//!
//! The key of a plan slot is its state, its offset into the plan and the
//! `width` plan actions before it (slots before the plan start read as PAD).
//! With `width = 0` the table is memoryless and every plan position is
//! independent, which keeps brute-force enumeration on small instances exact.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ActionDist, ActionModel, ModelError, Query};
use crate::codec::{Token, TokenSeq};
use crate::dataset::Dataset;
use crate::oracle::StateVec;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TabKey {
    pub state: StateVec,
    pub offset: usize,
    pub prev: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    alpha: f64,
    width: usize,
    counts: HashMap<TabKey, [f64; 4]>,
}

impl TabularModel {
    pub fn from_counts(
        width: usize,
        alpha: f64,
        counts: impl IntoIterator<Item = (TabKey, [f64; 4])>,
    ) -> Result<TabularModel, ModelError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ModelError::InvalidAlpha(alpha));
        }
        Ok(TabularModel {
            alpha,
            width,
            counts: counts.into_iter().collect(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of distinct keys seen in training.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Key of slot `pos` of `seq`.
    pub fn key(&self, seq: &TokenSeq, pos: usize) -> TabKey {
        let plan_start = seq.ctx_len;
        let prev = (pos.saturating_sub(self.width)..pos)
            .map(|j| {
                if j < plan_start {
                    Token::Pad.code()
                } else {
                    seq.actions[j].code()
                }
            })
            .collect();
        TabKey {
            state: seq.states[pos],
            offset: pos.saturating_sub(plan_start),
            prev: pad_front(prev, self.width),
        }
    }

    pub fn distribution(&self, key: &TabKey) -> ActionDist {
        match self.counts.get(key) {
            None => [0.25; 4],
            Some(c) => {
                let z: f64 = c.iter().sum::<f64>() + 4.0 * self.alpha;
                c.map(|n| (n + self.alpha) / z)
            }
        }
    }

    /// Distributions of every seen key.
    pub fn rows(&self) -> impl Iterator<Item = (&TabKey, ActionDist)> + '_ {
        self.counts.keys().map(|k| (k, self.distribution(k)))
    }
}

fn pad_front(mut prev: Vec<u8>, width: usize) -> Vec<u8> {
    while prev.len() < width {
        prev.insert(0, Token::Pad.code());
    }
    prev
}

/// Count every (window start, plan offset) pair of every demo.
pub fn fit_tabular(dataset: &Dataset, width: usize, alpha: f64) -> Result<TabularModel, ModelError> {
    let mut counts: HashMap<TabKey, [f64; 4]> = HashMap::new();
    for demo in &dataset.demos {
        let codes: Vec<usize> = demo
            .actions
            .iter()
            .map(|a| a.vocab_index().expect("demo actions are planning actions"))
            .collect();
        for start in 0..codes.len() {
            for t in 0..codes.len() - start {
                let pos = start + t;
                let prev = (pos.saturating_sub(width)..pos)
                    .map(|j| if j < start { Token::Pad.code() } else { codes[j] as u8 })
                    .collect();
                let key = TabKey {
                    state: demo.states[start],
                    offset: t,
                    prev: pad_front(prev, width),
                };
                counts.entry(key).or_insert([0.0; 4])[codes[pos]] += 1.0;
            }
        }
    }
    TabularModel::from_counts(width, alpha, counts)
}

impl ActionModel for TabularModel {
    fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>> {
        queries
            .iter()
            .map(|q| {
                q.positions
                    .iter()
                    .map(|&p| self.distribution(&self.key(q.seq, p)))
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{apply_mask, demo_window, training_batch, MaskPattern, WindowSpec};
    use crate::gridworld::{EnvSpec, Pose};
    use crate::model::mlm_loss;
    use crate::oracle::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> StateVec {
        StateVec::new(Pose::new(1, 1, crate::gridworld::Dir::N), (3, 3))
    }

    #[test]
    fn ratio_in_small_alpha_limit() {
        let key = TabKey {
            state: state(),
            offset: 0,
            prev: vec![],
        };
        let m = TabularModel::from_counts(0, 1e-12, [(key.clone(), [1.0, 0.0, 3.0, 0.0])]).unwrap();
        let d = m.distribution(&key);
        assert!((d[2] - 0.75).abs() < 1e-9 && (d[0] - 0.25).abs() < 1e-9);
        let other = TabKey { offset: 1, ..key };
        assert_eq!(m.distribution(&other), [0.25; 4]);
    }

    #[test]
    fn alpha_must_be_positive() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 2, 0.0, 0).unwrap();
        assert!(matches!(fit_tabular(&ds, 0, 0.0), Err(ModelError::InvalidAlpha(_))));
        assert!(fit_tabular(&ds, 0, -1.0).is_err());
    }

    #[test]
    fn rows_are_normalized() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 40, 0.2, 5).unwrap();
        for width in [0, 2] {
            let m = fit_tabular(&ds, width, 0.3).unwrap();
            assert!(!m.is_empty());
            for (_, d) in m.rows() {
                assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn empty_dataset_is_uniform() {
        let ds = Dataset::new(EnvSpec::local_7x7(), 0, 0.0, vec![]);
        let m = fit_tabular(&ds, 1, 0.5).unwrap();
        assert_eq!(m.distribution(&TabKey { state: state(), offset: 0, prev: vec![4] }), [0.25; 4]);
    }

    #[test]
    fn deterministic_context_is_confident() {
        // One demo seen five times: each key always precedes the same action,
        // so p = (5 + a) / (5 + 4a) >= 0.99 at a = 0.01.
        let one = generate_dataset(&EnvSpec::local_7x7(), 1, 0.0, 9).unwrap();
        let demo = &one.demos[0];
        let ds = Dataset::new(one.spec.clone(), 0, 0.0, vec![demo.clone(); 5]);
        let m = fit_tabular(&ds, 0, 0.01).unwrap();
        let w = demo_window(demo, 0, WindowSpec { ctx_len: 0, horizon: demo.len().min(5) });
        let pat = MaskPattern::new(vec![0], &w).unwrap();
        let d = m.marginals(&apply_mask(&w, &pat).seq, &pat);
        let target = demo.actions[0].vocab_index().unwrap();
        assert!(d[0][target] >= 0.99);
    }

    #[test]
    fn loss_matches_hand_count() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 1, 0.0, 9).unwrap();
        let alpha = 0.5;
        let m = fit_tabular(&ds, 0, alpha).unwrap();
        let batch = training_batch(&ds, 32, WindowSpec { ctx_len: 0, horizon: 5 }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // Shortest-path demos never revisit a state, so each (start, offset)
        // key is seen exactly once: p(target) = (1 + a) / (1 + 4a).
        let expect = -((1.0 + alpha) / (1.0 + 4.0 * alpha)).ln();
        let loss = mlm_loss(&m, &batch).unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }
}
