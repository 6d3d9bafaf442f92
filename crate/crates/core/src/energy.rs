//! Trajectory energies: model pseudo-likelihood, lava constraints, constant
//! offsets and their sums.
//!
//! The model energy of a plan is the sum over plan slots of the negative log
//! probability the model gives the slot's action when that slot alone is
//! masked. All masked variants of a plan are sent to the model as one batch.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{make_plan_template, CodecError, Token, TokenSeq};
use crate::gridworld::{Action, GridEnv, Layout};
use crate::model::{ActionDist, ActionModel, Query};
use crate::oracle::{corrupt_actions, optimal_plan, StateVec};

/// Energy charged per plan step that ends on a forbidden cell.
pub const BARRIER: f64 = 1e3;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("plan region still holds PAD or MASK tokens")]
    IncompletePlan,
    #[error("cannot compose an empty list of energies")]
    EmptyComposition,
    #[error("environment has no path to the goal")]
    NoPath,
    #[error("optimal plan has {len} actions, fewer than the horizon {horizon}")]
    PlanTooShort { len: usize, horizon: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyKind {
    ModelPll,
    Constraint,
    Constant,
    Composite,
}

/// Pseudo-likelihood energy of one model.
#[derive(Clone)]
pub struct PllEnergy {
    pub model: Arc<dyn ActionModel>,
    /// Layout the model is shown instead of the sequence's own, e.g. the
    /// obstacle subset a composition member was trained on.
    pub view: Option<Arc<Layout>>,
}

impl PllEnergy {
    fn shown(&self, seq: &TokenSeq) -> TokenSeq {
        match &self.view {
            Some(v) => seq.with_layout(v.clone()),
            None => seq.clone(),
        }
    }

    /// Per-slot `-ln p(a_t | rest)` for each sequence, one model batch.
    fn terms_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<Vec<f64>>, EnergyError> {
        let mut masked = Vec::new();
        let mut targets = Vec::new();
        for seq in seqs {
            let shown = self.shown(seq);
            let plan = seq.plan_actions().ok_or(EnergyError::IncompletePlan)?;
            for (t, a) in seq.plan_range().zip(plan) {
                let mut m = shown.clone();
                m.actions[t] = Token::Mask;
                masked.push((m, t));
                targets.push(a.vocab_index().expect("plan tokens are planning actions"));
            }
        }
        let positions: Vec<[usize; 1]> = masked.iter().map(|(_, t)| [*t]).collect();
        let queries: Vec<Query> = masked
            .iter()
            .zip(&positions)
            .map(|((seq, _), p)| Query { seq, positions: p })
            .collect();
        let dists = self.model.marginals_batch(&queries);
        let mut flat = dists.into_iter().zip(targets).map(|(d, a)| -d[0][a].ln());
        Ok(seqs
            .iter()
            .map(|s| flat.by_ref().take(s.horizon).collect())
            .collect())
    }
}

/// Barrier on forbidden cells along the simulated plan rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEnergy {
    pub forbidden: Arc<BTreeSet<(u8, u8)>>,
    pub barrier: f64,
}

impl ConstraintEnergy {
    fn evaluate(&self, seq: &TokenSeq) -> f64 {
        self.barrier * violations(&self.forbidden, seq) as f64
    }
}

#[derive(Clone)]
pub enum EnergyFn {
    Pll(PllEnergy),
    Constraint(ConstraintEnergy),
    Constant(f64),
    Composite(Vec<EnergyFn>),
}

impl fmt::Debug for EnergyFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnergyFn::Pll(p) => write!(f, "Pll(view: {})", p.view.is_some()),
            EnergyFn::Constraint(c) => write!(f, "Constraint({} cells, B={})", c.forbidden.len(), c.barrier),
            EnergyFn::Constant(c) => write!(f, "Constant({c})"),
            EnergyFn::Composite(parts) => f.debug_list().entries(parts).finish(),
        }
    }
}

impl EnergyFn {
    pub fn pll(model: Arc<dyn ActionModel>) -> EnergyFn {
        EnergyFn::Pll(PllEnergy { model, view: None })
    }

    /// Model energy that always shows the model `view` as the layout.
    pub fn pll_with_view(model: Arc<dyn ActionModel>, view: Layout) -> EnergyFn {
        EnergyFn::Pll(PllEnergy {
            model,
            view: Some(Arc::new(view)),
        })
    }

    pub fn constraint(forbidden: impl IntoIterator<Item = (u8, u8)>) -> EnergyFn {
        EnergyFn::Constraint(ConstraintEnergy {
            forbidden: Arc::new(forbidden.into_iter().collect()),
            barrier: BARRIER,
        })
    }

    pub fn kind(&self) -> EnergyKind {
        match self {
            EnergyFn::Pll(_) => EnergyKind::ModelPll,
            EnergyFn::Constraint(_) => EnergyKind::Constraint,
            EnergyFn::Constant(_) => EnergyKind::Constant,
            EnergyFn::Composite(_) => EnergyKind::Composite,
        }
    }

    /// Leaf energies, with nested composites flattened.
    pub fn leaves(&self) -> Vec<&EnergyFn> {
        match self {
            EnergyFn::Composite(parts) => parts.iter().flat_map(|p| p.leaves()).collect(),
            leaf => vec![leaf],
        }
    }

    pub fn has_model(&self) -> bool {
        self.leaves().iter().any(|l| matches!(l, EnergyFn::Pll(_)))
    }

    pub fn evaluate(&self, seq: &TokenSeq) -> Result<f64, EnergyError> {
        Ok(self.evaluate_batch(std::slice::from_ref(seq))?[0])
    }

    /// Energies of many complete plans, batching model queries per leaf.
    ///
    /// Leaf values are summed in sorted order so that composition is exactly
    /// associative and commutative.
    pub fn evaluate_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<f64>, EnergyError> {
        if seqs.iter().any(|s| s.plan_actions().is_none()) {
            return Err(EnergyError::IncompletePlan);
        }
        let leaves = self.leaves();
        let mut per_leaf = Vec::with_capacity(leaves.len());
        for leaf in &leaves {
            per_leaf.push(match leaf {
                EnergyFn::Pll(p) => p.terms_batch(seqs)?.iter().map(|t| t.iter().sum()).collect(),
                EnergyFn::Constraint(c) => seqs.iter().map(|s| c.evaluate(s)).collect(),
                EnergyFn::Constant(v) => vec![*v; seqs.len()],
                EnergyFn::Composite(_) => unreachable!("leaves are flattened"),
            });
        }
        Ok((0..seqs.len())
            .map(|i| {
                let mut vals: Vec<f64> = per_leaf.iter().map(|v: &Vec<f64>| v[i]).collect();
                vals.sort_by(f64::total_cmp);
                vals.iter().sum()
            })
            .collect())
    }

    /// Local energy of each of the four actions at every position in
    /// `positions` of `masked` (where those slots hold `MASK`).
    ///
    /// Model leaves contribute `-ln p(a)`. Constraint leaves contribute the
    /// barrier energy of `plan` with the candidate action substituted at that
    /// position and every other slot as in `plan`. Constant leaves shift all
    /// actions equally and are skipped.
    pub fn local_energies(&self, masked: &TokenSeq, plan: &TokenSeq, positions: &[usize]) -> Vec<[f64; 4]> {
        let mut out = vec![[0.0; 4]; positions.len()];
        for leaf in self.leaves() {
            match leaf {
                EnergyFn::Pll(p) => {
                    let shown = p.shown(masked);
                    let dists: Vec<ActionDist> = p
                        .model
                        .marginals_batch(&[Query {
                            seq: &shown,
                            positions,
                        }])
                        .pop()
                        .unwrap_or_default();
                    for (o, d) in out.iter_mut().zip(dists) {
                        for k in 0..4 {
                            o[k] += -d[k].ln();
                        }
                    }
                }
                EnergyFn::Constraint(c) => {
                    for (o, &t) in out.iter_mut().zip(positions) {
                        let mut probe = plan.clone();
                        for (k, a) in Action::PLANNING.iter().enumerate() {
                            probe.actions[t] = Token::from(*a);
                            o[k] += c.evaluate(&probe);
                        }
                    }
                }
                EnergyFn::Constant(_) | EnergyFn::Composite(_) => {}
            }
        }
        out
    }
}

/// Sum of energies. Nested composites are kept as given and flattened on
/// evaluation.
pub fn compose(energies: Vec<EnergyFn>) -> Result<EnergyFn, EnergyError> {
    if energies.is_empty() {
        return Err(EnergyError::EmptyComposition);
    }
    Ok(EnergyFn::Composite(energies))
}

/// Model energy of a complete plan.
pub fn pll_energy<M: ActionModel + ?Sized>(model: &M, seq: &TokenSeq) -> Result<f64, EnergyError> {
    Ok(pll_terms(model, seq)?.iter().sum())
}

/// The per-slot terms of [`pll_energy`], each from its own single-mask query.
pub fn pll_terms<M: ActionModel + ?Sized>(model: &M, seq: &TokenSeq) -> Result<Vec<f64>, EnergyError> {
    let plan = seq.plan_actions().ok_or(EnergyError::IncompletePlan)?;
    let masked: Vec<TokenSeq> = seq
        .plan_range()
        .map(|t| {
            let mut m = seq.clone();
            m.actions[t] = Token::Mask;
            m
        })
        .collect();
    let positions: Vec<[usize; 1]> = seq.plan_range().map(|t| [t]).collect();
    let queries: Vec<Query> = masked
        .iter()
        .zip(&positions)
        .map(|(s, p)| Query { seq: s, positions: p })
        .collect();
    let dists = model.marginals_batch(&queries);
    Ok(dists
        .iter()
        .zip(plan)
        .map(|(d, a)| -d[0][a.vocab_index().expect("planning action")].ln())
        .collect())
}

/// Barrier energy of `seq`'s plan against `forbidden` cells.
pub fn constraint_energy(forbidden: &BTreeSet<(u8, u8)>, seq: &TokenSeq) -> f64 {
    BARRIER * violations(forbidden, seq) as f64
}

/// Poses visited by the plan under deterministic dynamics, starting from
/// the current state. Non-action tokens leave the pose unchanged.
pub fn rollout_cells(seq: &TokenSeq) -> Vec<(u8, u8)> {
    let layout = &seq.layout;
    let mut pose = seq.current_state().pose();
    let mut opened: Vec<(u8, u8)> = Vec::new();
    let blocked = |c: &(u8, u8)| layout.blocked.binary_search(c).is_ok();
    let closed = |c: &(u8, u8), opened: &[(u8, u8)]| layout.closed_doors.binary_search(c).is_ok() && !opened.contains(c);
    seq.actions[seq.plan_range()]
        .iter()
        .map(|tok| {
            match tok.action() {
                Some(Action::Left) => pose.dir = pose.dir.left(),
                Some(Action::Right) => pose.dir = pose.dir.right(),
                Some(Action::Forward) => {
                    if let Some(f) = pose.front(layout.width, layout.height) {
                        if !blocked(&f) && !closed(&f, &opened) {
                            pose.x = f.0;
                            pose.y = f.1;
                        }
                    }
                }
                Some(Action::Open) => {
                    if let Some(f) = pose.front(layout.width, layout.height) {
                        if closed(&f, &opened) {
                            opened.push(f);
                        }
                    }
                }
                _ => {}
            }
            pose.cell()
        })
        .collect()
}

/// Plan steps spent on forbidden cells. Entering one is absorbing: the
/// episode would end there, so every later step counts as well and entering
/// later always costs less than entering sooner.
fn violations(forbidden: &BTreeSet<(u8, u8)>, seq: &TokenSeq) -> usize {
    if forbidden.is_empty() {
        return 0;
    }
    let cells = rollout_cells(seq);
    cells
        .iter()
        .position(|c| forbidden.contains(c))
        .map_or(0, |first| cells.len() - first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub noise_level: f64,
    pub mean_energy: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Mean energy of the first `horizon` optimal actions of `env` after
/// corrupting them at each noise level, `trials` draws per level.
pub fn landscape<R: Rng + ?Sized>(
    energy: &EnergyFn,
    env: &GridEnv,
    horizon: usize,
    noise_levels: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<LandscapeRow>, EnergyError> {
    let plan = optimal_plan(env).map_err(|_| EnergyError::NoPath)?;
    if plan.len() < horizon {
        return Err(EnergyError::PlanTooShort {
            len: plan.len(),
            horizon,
        });
    }
    let base = &plan[..horizon];
    let template = make_plan_template(&[], StateVec::of_env(env), horizon, 0, Arc::new(env.layout()))?;
    noise_levels
        .iter()
        .map(|&level| {
            let seqs: Vec<TokenSeq> = (0..trials)
                .map(|_| template.with_plan(&corrupt_actions(base, level, rng)))
                .collect();
            let energies = energy.evaluate_batch(&seqs)?;
            let (mean, stderr) = mean_stderr(&energies);
            Ok(LandscapeRow {
                noise_level: level,
                mean_energy: mean,
                stderr,
                trials,
            })
        })
        .collect()
}

/// Sample mean and standard error (zero for fewer than two values).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn write_landscape_csv(rows: &[LandscapeRow], out: impl Write) -> Result<(), EnergyError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_landscape_csv(rows: &[LandscapeRow], path: &Path) -> Result<(), EnergyError> {
    write_landscape_csv(rows, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::MaskPattern;
    use crate::gridworld::{Dir, Pose};
    use crate::model::{fit_tabular, MaskedSeqModel, ModelConfig, UniformModel};
    use crate::dataset::Dataset;
    use crate::gridworld::EnvSpec;
    use crate::oracle::demo_from_env;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn open_5x5() -> GridEnv {
        GridEnv::empty(5, 5, Pose::new(1, 3, Dir::N), (3, 1))
    }

    fn seq_of(env: &GridEnv, plan: &[Action]) -> TokenSeq {
        make_plan_template(&[], StateVec::of_env(env), plan.len(), 0, Arc::new(env.layout()))
            .unwrap()
            .with_plan(plan)
    }

    #[test]
    fn uniform_energy_is_t_ln4() {
        let s = seq_of(&open_5x5(), &[Action::Forward; 5]);
        let e = pll_energy(&UniformModel, &s).unwrap();
        assert!((e - 5.0 * 4f64.ln()).abs() < 1e-12);
        assert!((5.0 * 4f64.ln() - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn incomplete_plans_are_rejected() {
        let env = open_5x5();
        let t = make_plan_template(&[], StateVec::of_env(&env), 3, 0, Arc::new(env.layout())).unwrap();
        assert!(matches!(pll_energy(&UniformModel, &t), Err(EnergyError::IncompletePlan)));
        let e = EnergyFn::pll(Arc::new(UniformModel));
        assert!(matches!(e.evaluate(&t), Err(EnergyError::IncompletePlan)));
    }

    #[test]
    fn batched_terms_equal_separate_queries() {
        let mut m = MaskedSeqModel::<f32>::new(ModelConfig::tiny(6, 5), 4).unwrap();
        m.params_mut()[0] += 0.3;
        let model = Arc::new(m);
        let env = open_5x5();
        let s = seq_of(&env, &[Action::Forward, Action::Right, Action::Forward, Action::Left]);
        let terms = pll_terms(&*model, &s).unwrap();
        // Recompute each term from its own single-position query.
        for (t, term) in s.plan_range().zip(&terms) {
            let pat = MaskPattern::new(vec![t], &s).unwrap();
            let mut masked = s.clone();
            masked.actions[t] = Token::Mask;
            let d = model.marginals(&masked, &pat)[0];
            let a = s.actions[t].action().unwrap().vocab_index().unwrap();
            assert_eq!(-d[a].ln(), *term);
        }
        let e = EnergyFn::pll(model.clone());
        let batch = e.evaluate_batch(&[s.clone(), s.with_plan(&[Action::Left; 4])]).unwrap();
        assert_eq!(batch[0], terms.iter().sum::<f64>());
    }

    #[test]
    fn constraint_counts_steps_on_forbidden_cells() {
        let env = open_5x5();
        let s = seq_of(&env, &[Action::Forward, Action::Right, Action::Forward]);
        assert_eq!(rollout_cells(&s), vec![(1, 2), (1, 2), (2, 2)]);
        let none = BTreeSet::from([(3, 3)]);
        assert_eq!(constraint_energy(&none, &s), 0.0);
        // Only the third step enters (2, 2).
        let lava = BTreeSet::from([(2, 2)]);
        assert_eq!(constraint_energy(&lava, &s), 1000.0);
        // Entering at the first step absorbs the remaining two.
        let early = BTreeSet::from([(1, 2)]);
        assert_eq!(constraint_energy(&early, &s), 3000.0);
        // Leaving the cell again does not undo the entry.
        let back = seq_of(&env, &[Action::Forward, Action::Left, Action::Left, Action::Forward]);
        assert_eq!(constraint_energy(&early, &back), 4000.0);
        // Walls stop movement, so bumping never reaches the far cell.
        let bump = seq_of(&env, &[Action::Forward; 4]);
        assert_eq!(rollout_cells(&bump).last(), Some(&(1, 1)));
    }

    #[test]
    fn constraint_rollout_honors_doors() {
        let mut env = open_5x5();
        env.set_cell(1, 2, crate::gridworld::Cell::Door { open: false }).unwrap();
        let blocked = seq_of(&env, &[Action::Forward]);
        assert_eq!(rollout_cells(&blocked), vec![(1, 3)]);
        let opened = seq_of(&env, &[Action::Open, Action::Forward]);
        assert_eq!(rollout_cells(&opened), vec![(1, 3), (1, 2)]);
    }

    #[test]
    fn composition_is_sum_and_identity() {
        let env = open_5x5();
        let s = seq_of(&env, &[Action::Forward, Action::Forward, Action::Right]);
        let tab = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let demo = demo_from_env(&env, &mut rng).unwrap();
            let ds = Dataset::new(EnvSpec::default(), 0, 0.0, vec![demo]);
            Arc::new(fit_tabular(&ds, 0, 0.1).unwrap())
        };
        let e1 = EnergyFn::pll(tab);
        let e2 = EnergyFn::constraint([(1, 1)]);
        let v1 = e1.evaluate(&s).unwrap();
        let v2 = e2.evaluate(&s).unwrap();
        // The second step reaches (1, 1) and the turn stays there.
        assert_eq!(v2, 2000.0);
        assert_eq!(compose(vec![e1.clone(), e2.clone()]).unwrap().evaluate(&s).unwrap(), v1 + v2);
        assert_eq!(compose(vec![e1.clone()]).unwrap().evaluate(&s).unwrap(), v1);
        assert_eq!(
            compose(vec![e1.clone(), EnergyFn::Constant(0.0)]).unwrap().evaluate(&s).unwrap(),
            v1
        );
        let c = EnergyFn::Constant(0.1);
        let left = compose(vec![compose(vec![e1.clone(), e2.clone()]).unwrap(), c.clone()]).unwrap();
        let right = compose(vec![c, compose(vec![e2, e1]).unwrap()]).unwrap();
        assert_eq!(left.evaluate(&s).unwrap(), right.evaluate(&s).unwrap());
        assert!(matches!(compose(vec![]), Err(EnergyError::EmptyComposition)));
    }

    #[test]
    fn local_energies_fold_in_constraints() {
        let env = open_5x5();
        let plan = seq_of(&env, &[Action::Left, Action::Forward]);
        let mut masked = plan.clone();
        masked.actions[0] = Token::Mask;
        let e = compose(vec![EnergyFn::pll(Arc::new(UniformModel)), EnergyFn::constraint([(1, 2)])]).unwrap();
        let local = e.local_energies(&masked, &plan, &[0]);
        // Facing north, the plan reaches (1, 2) unless the first action
        // turns away; moving there at once costs both steps.
        let ln4 = 4f64.ln();
        assert_eq!(local[0], [ln4, ln4, ln4 + 2000.0, ln4 + 1000.0]);
    }

    #[test]
    fn uniform_landscape_is_flat() {
        let env = GridEnv::empty(7, 7, Pose::new(1, 5, Dir::N), (5, 1));
        let e = EnergyFn::pll(Arc::new(UniformModel));
        let rows = landscape(&e, &env, 5, &[0.0, 0.5, 1.0], 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for r in &rows {
            assert!((r.mean_energy - 5.0 * 4f64.ln()).abs() < 1e-9);
            assert!(r.stderr < 1e-9);
        }
        let mut buf = Vec::new();
        write_landscape_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("noise_level,mean_energy,stderr,trials\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn zero_noise_has_zero_variance() {
        let env = GridEnv::empty(7, 7, Pose::new(1, 5, Dir::N), (5, 1));
        let ds = Dataset::new(
            EnvSpec::default(),
            0,
            0.0,
            vec![demo_from_env(&env, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()],
        );
        let e = EnergyFn::pll(Arc::new(fit_tabular(&ds, 0, 0.1).unwrap()));
        let rows = landscape(&e, &env, 5, &[0.0], 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rows[0].stderr, 0.0);
        assert!(matches!(
            landscape(&e, &env, 50, &[0.0], 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(EnergyError::PlanTooShort { .. })
        ));
    }

    #[test]
    fn stderr_matches_formula() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
