//! Plan search over the plan region of a template: Gibbs refinement driven by
//! model marginals, plus random-shooting and CEM baselines, and the episode
//! loop that executes plans in an environment.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{make_plan_template, CodecError, Token, TokenSeq};
use crate::energy::{EnergyError, EnergyFn};
use crate::gridworld::{Action, GridEnv, Outcome};
use crate::oracle::StateVec;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan configuration: {0}")]
    InvalidConfig(String),
    #[error("template horizon {template} does not match configured horizon {config}")]
    HorizonMismatch { template: usize, config: usize },
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sampling temperature over Gibbs iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Temperature {
    Constant { value: f64 },
    /// Linear from `start` at the first sweep to `end` at the last.
    Linear { start: f64, end: f64 },
    /// Always take the lowest local energy (ties broken at random).
    Greedy,
}

impl Temperature {
    pub fn constant(value: f64) -> Temperature {
        Temperature::Constant { value }
    }

    /// Temperature for sweep `iter` of `iters` (sweep 0 is initialization).
    /// `None` means greedy.
    pub fn at(&self, iter: usize, iters: usize) -> Option<f64> {
        match *self {
            Temperature::Constant { value } => Some(value),
            Temperature::Linear { start, end } => {
                let frac = if iters == 0 { 0.0 } else { iter as f64 / iters as f64 };
                Some(start + (end - start) * frac)
            }
            Temperature::Greedy => None,
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Temperature::Constant { value } => value > 0.0 && value.is_finite(),
            Temperature::Linear { start, end } => start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite(),
            Temperature::Greedy => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Run every planned action, then plan the next segment.
    ExecuteAll,
    /// Run only the first planned action, then plan again.
    ReplanEachStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub horizon: usize,
    pub iters: usize,
    pub masks_per_step: usize,
    pub temperature: Temperature,
    pub execution: Execution,
    /// Past (state, action) pairs prepended as context.
    pub ctx_len: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 5,
            iters: 10,
            masks_per_step: 1,
            temperature: Temperature::constant(1.0),
            execution: Execution::ExecuteAll,
            ctx_len: 0,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.horizon == 0 {
            return Err(PlanError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.masks_per_step == 0 || self.masks_per_step > self.horizon {
            return Err(PlanError::InvalidConfig(format!(
                "masks_per_step must be in 1..={}",
                self.horizon
            )));
        }
        if !self.temperature.is_valid() {
            return Err(PlanError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    /// Plan as token codes.
    pub actions: Vec<u8>,
    pub energy: f64,
}

/// Plan state after initialization and after every Gibbs sweep.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanTrace {
    pub snapshots: Vec<Snapshot>,
}

impl PlanTrace {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in &self.snapshots {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()
    }
}

fn codes(plan: &[Action]) -> Vec<u8> {
    plan.iter().map(|a| a.code()).collect()
}

/// Draw an action index from local energies at `temp` (`None` = greedy).
fn sample_local<R: Rng + ?Sized>(local: &[f64; 4], temp: Option<f64>, rng: &mut R) -> usize {
    let min = local.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: [f64; 4] = match temp {
        Some(t) => local.map(|e| (-(e - min) / t).exp()),
        None => local.map(|e| if e == min { 1.0 } else { 0.0 }),
    };
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    // Rounding left `u` past the last bucket: take the last nonzero weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn check_template(template: &TokenSeq, cfg: &PlanConfig) -> Result<(), PlanError> {
    cfg.validate()?;
    if template.horizon != cfg.horizon {
        return Err(PlanError::HorizonMismatch {
            template: template.horizon,
            config: cfg.horizon,
        });
    }
    Ok(())
}

/// Iterative Gibbs refinement of the plan region of `template`.
///
/// Sweep 0 fills every plan slot from one all-masked query. Each later sweep
/// masks `masks_per_step` random plan slots, resamples them from their local
/// energies and re-scores the plan. The lowest-energy plan seen is returned.
pub fn gibbs_plan<R: Rng + ?Sized>(
    energy: &EnergyFn,
    template: &TokenSeq,
    cfg: &PlanConfig,
    rng: &mut R,
) -> Result<(Vec<Action>, PlanTrace), PlanError> {
    check_template(template, cfg)?;
    let range = template.plan_range();
    let all: Vec<usize> = range.clone().collect();
    let mut masked = template.clone();
    for &t in &all {
        masked.actions[t] = Token::Mask;
    }
    let local = energy.local_energies(&masked, template, &all);
    let temp0 = cfg.temperature.at(0, cfg.iters);
    let mut plan: Vec<Action> = local
        .iter()
        .map(|l| Action::PLANNING[sample_local(l, temp0, rng)])
        .collect();
    let mut current = template.with_plan(&plan);
    let mut cur_e = energy.evaluate(&current)?;
    let mut best = (plan.clone(), cur_e);
    let mut trace = PlanTrace::default();
    trace.snapshots.push(Snapshot {
        iteration: 0,
        actions: codes(&plan),
        energy: cur_e,
    });

    for it in 1..=cfg.iters {
        let temp = cfg.temperature.at(it, cfg.iters);
        let mut picks: Vec<usize> = sample(rng, cfg.horizon, cfg.masks_per_step)
            .into_iter()
            .map(|i| range.start + i)
            .collect();
        picks.sort_unstable();
        let mut masked = current.clone();
        for &t in &picks {
            masked.actions[t] = Token::Mask;
        }
        let local = energy.local_energies(&masked, &current, &picks);
        let mut changed = false;
        for (&t, l) in picks.iter().zip(&local) {
            let a = Action::PLANNING[sample_local(l, temp, rng)];
            let slot = t - range.start;
            if plan[slot] != a {
                plan[slot] = a;
                changed = true;
            }
        }
        if changed {
            current = template.with_plan(&plan);
            cur_e = energy.evaluate(&current)?;
        }
        trace.snapshots.push(Snapshot {
            iteration: it,
            actions: codes(&plan),
            energy: cur_e,
        });
        if cur_e < best.1 {
            best = (plan.clone(), cur_e);
        }
    }
    Ok((best.0, trace))
}

fn random_plan<R: Rng + ?Sized>(horizon: usize, rng: &mut R) -> Vec<Action> {
    (0..horizon)
        .map(|_| Action::PLANNING[rng.gen_range(0..Action::PLANNING.len())])
        .collect()
}

fn argmin(energies: &[f64]) -> usize {
    energies
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, be), (i, &e)| if e < be { (i, e) } else { (bi, be) })
        .0
}

/// Best of `n_samples` uniformly random plans.
pub fn random_shooting_plan<R: Rng + ?Sized>(
    energy: &EnergyFn,
    template: &TokenSeq,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Action>, PlanError> {
    if n_samples == 0 {
        return Err(PlanError::InvalidConfig("n_samples must be at least 1".into()));
    }
    let plans: Vec<Vec<Action>> = (0..n_samples).map(|_| random_plan(template.horizon, rng)).collect();
    let seqs: Vec<TokenSeq> = plans.iter().map(|p| template.with_plan(p)).collect();
    let energies = energy.evaluate_batch(&seqs)?;
    Ok(plans[argmin(&energies)].clone())
}

/// Elite-mutation search: each round keeps the `n_elite` lowest-energy
/// plans and refills the population by changing one random slot of an elite
/// to a uniformly drawn action. Returns the best plan seen.
pub fn cem_plan<R: Rng + ?Sized>(
    energy: &EnergyFn,
    template: &TokenSeq,
    n_samples: usize,
    n_elite: usize,
    iters: usize,
    rng: &mut R,
) -> Result<Vec<Action>, PlanError> {
    if n_samples == 0 || n_elite == 0 || n_elite > n_samples {
        return Err(PlanError::InvalidConfig("need 1 <= n_elite <= n_samples".into()));
    }
    let horizon = template.horizon;
    let mut pop: Vec<Vec<Action>> = (0..n_samples).map(|_| random_plan(horizon, rng)).collect();
    let score = |pop: &[Vec<Action>]| -> Result<Vec<f64>, PlanError> {
        let seqs: Vec<TokenSeq> = pop.iter().map(|p| template.with_plan(p)).collect();
        Ok(energy.evaluate_batch(&seqs)?)
    };
    let mut energies = score(&pop)?;
    let i = argmin(&energies);
    let mut best = (pop[i].clone(), energies[i]);
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]));
        let elites: Vec<Vec<Action>> = order[..n_elite].iter().map(|&i| pop[i].clone()).collect();
        pop = (0..n_samples)
            .map(|k| {
                let mut child = elites[k % n_elite].clone();
                let slot = rng.gen_range(0..horizon);
                child[slot] = Action::PLANNING[rng.gen_range(0..Action::PLANNING.len())];
                child
            })
            .collect();
        energies = score(&pop)?;
        let i = argmin(&energies);
        if energies[i] < best.1 {
            best = (pop[i].clone(), energies[i]);
        }
    }
    Ok(best.0)
}

/// Which search produces each plan during an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Planner {
    Gibbs,
    Shooting { samples: usize },
    /// `rounds` elite-mutation rounds per plan, independent of the Gibbs
    /// sweep count since each round scores a whole population.
    Cem { samples: usize, elite: usize, rounds: usize },
}

impl Planner {
    pub fn name(&self) -> &'static str {
        match self {
            Planner::Gibbs => "gibbs",
            Planner::Shooting { .. } => "shooting",
            Planner::Cem { .. } => "cem",
        }
    }

    /// Search settings used in the sampler comparison.
    pub fn shooting() -> Planner {
        Planner::Shooting { samples: 30 }
    }

    pub fn cem() -> Planner {
        Planner::Cem {
            samples: 30,
            elite: 3,
            rounds: 10,
        }
    }

    pub fn plan<R: Rng + ?Sized>(
        &self,
        energy: &EnergyFn,
        template: &TokenSeq,
        cfg: &PlanConfig,
        rng: &mut R,
    ) -> Result<Vec<Action>, PlanError> {
        match *self {
            Planner::Gibbs => Ok(gibbs_plan(energy, template, cfg, rng)?.0),
            Planner::Shooting { samples } => random_shooting_plan(energy, template, samples, rng),
            Planner::Cem { samples, elite, rounds } => cem_plan(energy, template, samples, elite, rounds, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub lava_hit: bool,
}

/// Plan and act in a copy of `env` until it terminates.
///
/// The environment and the planner draw from separate streams seeded from
/// `rng`, so two execution modes run on the same seed see the same
/// environment noise sequence.
pub fn run_episode<R: Rng + ?Sized>(
    env: &GridEnv,
    energy: &EnergyFn,
    planner: &Planner,
    cfg: &PlanConfig,
    rng: &mut R,
) -> Result<EpisodeResult, PlanError> {
    cfg.validate()?;
    let mut env_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut plan_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut env = env.clone();
    let mut history: Vec<(StateVec, Action)> = Vec::new();
    while !env.is_terminated() {
        let ctx = &history[history.len().saturating_sub(cfg.ctx_len)..];
        let template = make_plan_template(
            ctx,
            StateVec::of_env(&env),
            cfg.horizon,
            cfg.ctx_len,
            Arc::new(env.layout()),
        )?;
        let plan = planner.plan(energy, &template, cfg, &mut plan_rng)?;
        let run = match cfg.execution {
            Execution::ExecuteAll => plan.len(),
            Execution::ReplanEachStep => 1,
        };
        for &a in &plan[..run] {
            let before = StateVec::of_env(&env);
            let r = env.step(a, &mut env_rng);
            if r.executed.vocab_index().is_some() {
                history.push((before, r.executed));
            }
            if r.terminated {
                break;
            }
        }
    }
    Ok(EpisodeResult {
        success: env.outcome() == Outcome::GoalReached,
        steps: env.steps(),
        lava_hit: env.outcome() == Outcome::LavaDeath,
    })
}

/// Convenience: an episode driven by a fresh RNG seeded with `seed`.
pub fn run_episode_seeded(
    env: &GridEnv,
    energy: &EnergyFn,
    planner: &Planner,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<EpisodeResult, PlanError> {
    run_episode(env, energy, planner, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Uniformly random actions until termination, from the same env stream
/// construction as [`run_episode`].
pub fn random_episode<R: Rng + ?Sized>(env: &GridEnv, rng: &mut R) -> EpisodeResult {
    let mut env_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut act_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut env = env.clone();
    while !env.is_terminated() {
        let a = Action::PLANNING[act_rng.gen_range(0..Action::PLANNING.len())];
        env.step(a, &mut env_rng);
    }
    EpisodeResult {
        success: env.outcome() == Outcome::GoalReached,
        steps: env.steps(),
        lava_hit: env.outcome() == Outcome::LavaDeath,
    }
}
