//! Experiment configuration, evaluation drivers for the property studies,
//! and metrics reports with a replayable manifest.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ini::Ini;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::energy::{compose, landscape, mean_stderr, EnergyError, EnergyFn, LandscapeRow};
use crate::gridworld::{build_env, Cell, EnvError, EnvSpec, GridEnv};
use crate::model::{load_checkpoint, train_new, ActionModel, MaskedSeqModel, ModelError, TrainConfig, TrainOutcome};
use crate::oracle::{generate_dataset, generate_dataset_with, optimal_plan, OracleError};
use crate::planner::{random_episode, run_episode, EpisodeResult, Execution, PlanConfig, PlanError, Planner, Temperature};
use crate::rng::stream_seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Seed streams kept apart from the dataset streams.
const EVAL_ENV_STREAM: u64 = 0x4556_414c_0000_0001;
const EVAL_EPISODE_STREAM: u64 = 0x4556_414c_0000_0002;
const LAVA_STREAM: u64 = 0x4556_414c_0000_0003;
const LANDSCAPE_STREAM: u64 = 0x4556_414c_0000_0004;
const MAX_LAVA_REROLLS: usize = 20;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint not found: {0}")]
    CheckpointMissing(PathBuf),
    #[error("report schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::CheckpointMissing(_) => "checkpoint_missing",
            HarnessError::Schema(_) => "schema",
            HarnessError::Env(_) => "env",
            HarnessError::Oracle(_) => "oracle",
            HarnessError::Model(_) => "model",
            HarnessError::Plan(_) => "plan",
            HarnessError::Energy(_) => "energy",
            HarnessError::Dataset(_) => "dataset",
            HarnessError::Io(_) => "io",
            HarnessError::Json(_) => "json",
            HarnessError::Csv(_) => "csv",
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

type Cells = Vec<(u8, u8)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataParams {
    pub demos: usize,
    pub p_corrupt: f64,
    pub seed: u64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            demos: 500,
            p_corrupt: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropertyMode {
    Standard,
    /// Up to `max_lava` lava cells are placed on the shortest path of each
    /// evaluation layout and a constraint energy forbids them.
    Adaptation { max_lava: usize },
    /// Evaluate on layouts from `test_env`, which must differ from the
    /// training family.
    Generalization { test_env: EnvSpec },
    /// One model per obstacle subset (split by index parity); their energies
    /// are summed at test time.
    Composition,
}

impl PropertyMode {
    pub fn name(&self) -> &'static str {
        match self {
            PropertyMode::Standard => "standard",
            PropertyMode::Adaptation { .. } => "adaptation",
            PropertyMode::Generalization { .. } => "generalization",
            PropertyMode::Composition => "composition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub env: EnvSpec,
    pub data: DataParams,
    pub train: TrainConfig,
    pub train_seed: u64,
    pub plan: PlanConfig,
    pub planner: Planner,
    pub mode: PropertyMode,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            env: EnvSpec::local_7x7(),
            data: DataParams::default(),
            train: TrainConfig {
                grid: 7,
                ..TrainConfig::default()
            },
            train_seed: 0,
            plan: PlanConfig::default(),
            planner: Planner::Gibbs,
            mode: PropertyMode::Standard,
            episodes: 200,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value for {key}: {value:?}")))
}

/// `1.0`, `greedy`, or `start..end` for a linear anneal.
pub fn parse_temperature(value: &str) -> Result<Temperature> {
    let v = value.trim();
    if v == "greedy" {
        return Ok(Temperature::Greedy);
    }
    if let Some((a, b)) = v.split_once("..") {
        return Ok(Temperature::Linear {
            start: parse("temperature", a)?,
            end: parse("temperature", b)?,
        });
    }
    Ok(Temperature::constant(parse("temperature", v)?))
}

pub fn parse_execution(value: &str) -> Result<Execution> {
    match value.trim() {
        "all" => Ok(Execution::ExecuteAll),
        "replan" => Ok(Execution::ReplanEachStep),
        other => Err(HarnessError::Config(format!("execution must be all or replan, got {other:?}"))),
    }
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse("seeds", s))
        .collect()
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.plan.validate()?;
        if self.episodes == 0 {
            return Err(HarnessError::Config("episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.data.demos == 0 {
            return Err(HarnessError::Config("demos must be at least 1".into()));
        }
        if self.plan.ctx_len + self.plan.horizon > self.train.ctx_len + self.train.horizon {
            return Err(HarnessError::Config(format!(
                "plan window {}+{} exceeds the trained window {}+{}",
                self.plan.ctx_len, self.plan.horizon, self.train.ctx_len, self.train.horizon
            )));
        }
        let test_env = match &self.mode {
            PropertyMode::Generalization { test_env } => {
                test_env.validate()?;
                if *test_env == self.env {
                    return Err(HarnessError::Config(
                        "generalization needs a test family different from the training family".into(),
                    ));
                }
                test_env
            }
            _ => &self.env,
        };
        if test_env.width.max(test_env.height) as usize > self.train.grid {
            return Err(HarnessError::Config(format!(
                "environment size exceeds the model grid {}",
                self.train.grid
            )));
        }
        Ok(())
    }

    /// Parse a `key = value` config with sections `[env] [data] [train]
    /// [plan] [eval]` and, for generalization, `[test_env]`. Missing keys keep
    /// their defaults.
    pub fn from_ini_str(text: &str) -> Result<ExperimentSpec> {
        let ini = Ini::load_from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut spec = ExperimentSpec::default();
        let mut test_env: Option<EnvSpec> = None;
        let mut mode = "standard".to_string();
        let mut max_lava = 2usize;
        let (mut samples, mut elite, mut rounds) = (30usize, 3usize, 10usize);
        let mut planner = "gibbs".to_string();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                match section {
                    "env" => spec.env.set(key, value)?,
                    "test_env" => test_env.get_or_insert_with(EnvSpec::default).set(key, value)?,
                    "data" => match key {
                        "demos" => spec.data.demos = parse(key, value)?,
                        "p_corrupt" => spec.data.p_corrupt = parse(key, value)?,
                        "seed" => spec.data.seed = parse(key, value)?,
                        _ => return Err(unknown(section, key)),
                    },
                    "train" => {
                        let t = &mut spec.train;
                        match key {
                            "layers" => t.layers = parse(key, value)?,
                            "heads" => t.heads = parse(key, value)?,
                            "embed_dim" => t.embed_dim = parse(key, value)?,
                            "batch" => t.batch = parse(key, value)?,
                            "lr" => t.lr = parse(key, value)?,
                            "beta1" => t.betas.0 = parse(key, value)?,
                            "beta2" => t.betas.1 = parse(key, value)?,
                            "dropout" => t.dropout = parse(key, value)?,
                            "grad_clip" => t.grad_clip = parse(key, value)?,
                            "weight_decay" => t.weight_decay = parse(key, value)?,
                            "warmup_frac" => t.warmup_frac = parse(key, value)?,
                            "epochs" => t.max_epochs = parse(key, value)?,
                            "ctx_len" => t.ctx_len = parse(key, value)?,
                            "horizon" => t.horizon = parse(key, value)?,
                            "grid" => t.grid = parse(key, value)?,
                            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
                            "seed" => spec.train_seed = parse(key, value)?,
                            _ => return Err(unknown(section, key)),
                        }
                    }
                    "plan" => {
                        let p = &mut spec.plan;
                        match key {
                            "horizon" => p.horizon = parse(key, value)?,
                            "iters" => p.iters = parse(key, value)?,
                            "masks_per_step" => p.masks_per_step = parse(key, value)?,
                            "temperature" => p.temperature = parse_temperature(value)?,
                            "execution" => p.execution = parse_execution(value)?,
                            "ctx_len" => p.ctx_len = parse(key, value)?,
                            "seed" => p.seed = parse(key, value)?,
                            "planner" => planner = value.trim().to_string(),
                            "samples" => samples = parse(key, value)?,
                            "elite" => elite = parse(key, value)?,
                            "rounds" => rounds = parse(key, value)?,
                            _ => return Err(unknown(section, key)),
                        }
                    }
                    "eval" => match key {
                        "name" => spec.name = value.trim().to_string(),
                        "episodes" => spec.episodes = parse(key, value)?,
                        "seeds" => spec.seeds = parse_seeds(value)?,
                        "mode" => mode = value.trim().to_string(),
                        "max_lava" => max_lava = parse(key, value)?,
                        _ => return Err(unknown(section, key)),
                    },
                    _ => return Err(HarnessError::Config(format!("unknown section [{section}]"))),
                }
            }
        }
        spec.planner = match planner.as_str() {
            "gibbs" => Planner::Gibbs,
            "shooting" => Planner::Shooting { samples },
            "cem" => Planner::Cem { samples, elite, rounds },
            other => return Err(HarnessError::Config(format!("unknown planner {other:?}"))),
        };
        spec.mode = match mode.as_str() {
            "standard" => PropertyMode::Standard,
            "adaptation" => PropertyMode::Adaptation { max_lava },
            "composition" => PropertyMode::Composition,
            "generalization" => PropertyMode::Generalization {
                test_env: test_env
                    .ok_or_else(|| HarnessError::Config("generalization needs a [test_env] section".into()))?,
            },
            other => return Err(HarnessError::Config(format!("unknown mode {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        ExperimentSpec::from_ini_str(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }

    /// Family the evaluation layouts are drawn from.
    pub fn test_env(&self) -> &EnvSpec {
        match &self.mode {
            PropertyMode::Generalization { test_env } => test_env,
            _ => &self.env,
        }
    }
}

fn unknown(section: &str, key: &str) -> HarnessError {
    HarnessError::Config(format!("unknown key {key:?} in [{section}]"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Evaluation layout `index` for `seed`, disjoint from the dataset streams.
pub fn eval_env(spec: &EnvSpec, seed: u64, index: usize) -> Result<GridEnv> {
    Ok(build_env(spec, stream_seed(stream_seed(seed, EVAL_ENV_STREAM), index as u64))?)
}

/// RNG of episode `index` for `seed`; reproduces a single evaluation episode.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(stream_seed(seed, EVAL_EPISODE_STREAM), index as u64))
}

/// Obstacles of `env` split by index parity (even, odd).
pub fn split_obstacles(env: &GridEnv) -> (Cells, Cells) {
    let obstacles = env.obstacles();
    let even = obstacles.iter().step_by(2).copied().collect();
    let odd = obstacles.iter().skip(1).step_by(2).copied().collect();
    (even, odd)
}

/// Place `count` lava cells on the shortest path of `env`, skipping cells
/// that would disconnect the goal. Returns fewer cells when the path offers
/// no more safe spots.
pub fn add_path_lava<R: Rng + ?Sized>(env: &GridEnv, count: usize, rng: &mut R) -> Result<GridEnv> {
    let mut env = env.clone();
    let mut placed = 0;
    while placed < count {
        let plan = optimal_plan(&env)?;
        let mut cells: Vec<(u8, u8)> = env
            .simulate(&plan)
            .iter()
            .map(|r| r.next_state.cell())
            .filter(|&c| c != env.agent().cell() && c != env.goal() && env.cell(c.0, c.1) == Cell::Empty)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        cells.shuffle(rng);
        let mut ok = false;
        for (x, y) in cells {
            let mut trial = env.clone();
            trial.set_cell(x, y, Cell::Lava)?;
            if trial.is_solvable() {
                env = trial;
                ok = true;
                break;
            }
        }
        if !ok {
            break;
        }
        placed += 1;
    }
    Ok(env)
}

/// Evaluation layout with between 1 and `max_lava` lava cells on its path.
pub fn adaptation_env(spec: &EnvSpec, max_lava: usize, seed: u64, index: usize) -> Result<GridEnv> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(stream_seed(seed, LAVA_STREAM), index as u64));
    let count = rng.gen_range(1..=max_lava.max(1));
    // Layouts whose path has no safe cell for lava are rerolled.
    let base = stream_seed(stream_seed(seed, EVAL_ENV_STREAM), index as u64);
    let mut env = eval_env(spec, seed, index)?;
    for attempt in 1..=MAX_LAVA_REROLLS {
        let with_lava = add_path_lava(&env, count, &mut rng)?;
        if !with_lava.lava().is_empty() || attempt == MAX_LAVA_REROLLS {
            return Ok(with_lava);
        }
        env = build_env(spec, stream_seed(base, attempt as u64))?;
    }
    unreachable!("the last attempt always returns")
}

/// Training data for `spec`. Composition returns one dataset per obstacle
/// parity class; every other mode returns a single dataset.
pub fn prepare_datasets(spec: &ExperimentSpec) -> Result<Vec<Dataset>> {
    let d = &spec.data;
    match spec.mode {
        PropertyMode::Composition => (0..2)
            .map(|part| {
                let ds = generate_dataset_with(&spec.env, d.demos, d.p_corrupt, stream_seed(d.seed, part), |mut env, _| {
                    let (even, odd) = split_obstacles(&env);
                    let hidden = if part == 0 { odd } else { even };
                    for (x, y) in hidden {
                        env.set_cell(x, y, Cell::Empty).map_err(|_| OracleError::NoPath)?;
                    }
                    Ok(env)
                })?;
                Ok(ds)
            })
            .collect(),
        _ => Ok(vec![generate_dataset(&spec.env, d.demos, d.p_corrupt, d.seed)?]),
    }
}

pub struct Trained {
    pub models: Vec<Arc<MaskedSeqModel<f32>>>,
    pub outcomes: Vec<TrainOutcome>,
}

/// Train one model per dataset. Checkpoints go to `dir/part{i}` when given.
pub fn train_models(spec: &ExperimentSpec, datasets: &[Dataset], dir: Option<&Path>) -> Result<Trained> {
    let mut models = Vec::new();
    let mut outcomes = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        let sub = dir.map(|d| d.join(format!("part{i}")));
        if let Some(s) = &sub {
            fs::create_dir_all(s)?;
        }
        let (m, o) = train_new(ds, &spec.train, stream_seed(spec.train_seed, i as u64), sub.as_deref())?;
        models.push(Arc::new(m));
        outcomes.push(o);
    }
    Ok(Trained { models, outcomes })
}

/// Load `paths` in order, failing with [`HarnessError::CheckpointMissing`]
/// for the first absent file.
pub fn load_models(paths: &[PathBuf]) -> Result<Vec<Arc<MaskedSeqModel<f32>>>> {
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(HarnessError::CheckpointMissing(p.clone()));
            }
            Ok(Arc::new(load_checkpoint(p)?.0))
        })
        .collect()
}

pub fn write_loss_csv(outcomes: &[TrainOutcome], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["part", "epoch", "loss"])?;
    for (part, o) in outcomes.iter().enumerate() {
        for (epoch, loss) in o.loss_curve.iter().enumerate() {
            w.write_record([part.to_string(), (epoch + 1).to_string(), format!("{loss}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Which of the composition energies to plan with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionArm {
    Composed,
    Single(usize),
}

/// Energy for `env` under `mode`, built from `models`.
pub fn energy_for(mode: &PropertyMode, models: &[Arc<dyn ActionModel>], env: &GridEnv, arm: CompositionArm) -> Result<EnergyFn> {
    let first = || {
        models
            .first()
            .cloned()
            .ok_or_else(|| HarnessError::Config("no model supplied".into()))
    };
    match mode {
        PropertyMode::Standard | PropertyMode::Generalization { .. } => Ok(EnergyFn::pll(first()?)),
        PropertyMode::Adaptation { .. } => Ok(compose(vec![EnergyFn::pll(first()?), EnergyFn::constraint(env.lava())])?),
        PropertyMode::Composition => {
            if models.len() != 2 {
                return Err(HarnessError::Config(format!("composition needs 2 models, got {}", models.len())));
            }
            let layout = env.layout();
            let (even, odd) = split_obstacles(env);
            let views = [layout.without(&odd), layout.without(&even)];
            let part = |i: usize| EnergyFn::pll_with_view(models[i].clone(), views[i].clone());
            Ok(match arm {
                CompositionArm::Composed => compose(vec![part(0), part(1)])?,
                CompositionArm::Single(i) if i < 2 => part(i),
                CompositionArm::Single(i) => return Err(HarnessError::Config(format!("no composition part {i}"))),
            })
        }
    }
}

/// Evaluation layout `index` for `seed` under `mode`.
pub fn mode_env(mode: &PropertyMode, env: &EnvSpec, seed: u64, index: usize) -> Result<GridEnv> {
    match mode {
        PropertyMode::Adaptation { max_lava } => adaptation_env(env, *max_lava, seed, index),
        PropertyMode::Generalization { test_env } => eval_env(test_env, seed, index),
        _ => eval_env(env, seed, index),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub lava_hits: usize,
}

impl SeedMetrics {
    pub fn from_results(seed: u64, results: &[EpisodeResult]) -> SeedMetrics {
        let n = results.len();
        let successes = results.iter().filter(|r| r.success).count();
        SeedMetrics {
            seed,
            episodes: n,
            successes,
            success_rate: successes as f64 / n.max(1) as f64,
            mean_steps: results.iter().map(|r| r.steps as f64).sum::<f64>() / n.max(1) as f64,
            lava_hits: results.iter().filter(|r| r.lava_hit).count(),
        }
    }
}

/// Pooled success rate and its binomial standard error.
pub fn pooled(per_seed: &[SeedMetrics]) -> (f64, f64) {
    let n: usize = per_seed.iter().map(|s| s.episodes).sum();
    let k: usize = per_seed.iter().map(|s| s.successes).sum();
    let p = k as f64 / n.max(1) as f64;
    (p, (p * (1.0 - p) / n.max(1) as f64).sqrt())
}

/// Run `episodes` episodes per seed, each on its own layout and RNG stream.
pub fn run_seeds(
    seeds: &[u64],
    episodes: usize,
    mut episode: impl FnMut(u64, usize, &mut ChaCha8Rng) -> Result<EpisodeResult>,
) -> Result<Vec<SeedMetrics>> {
    seeds
        .iter()
        .map(|&seed| {
            let results = (0..episodes)
                .map(|i| episode(seed, i, &mut episode_rng(seed, i)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SeedMetrics::from_results(seed, &results))
        })
        .collect()
}

/// Planner episodes under `mode` with `models`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_planner(
    mode: &PropertyMode,
    env: &EnvSpec,
    models: &[Arc<dyn ActionModel>],
    arm: CompositionArm,
    planner: &Planner,
    plan: &PlanConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<SeedMetrics>> {
    let dynamics = env.dynamics;
    run_seeds(seeds, episodes, |seed, i, rng| {
        let mut e = mode_env(mode, env, seed, i)?;
        e.set_dynamics(dynamics);
        let energy = energy_for(mode, models, &e, arm)?;
        Ok(run_episode(&e, &energy, planner, plan, rng)?)
    })
}

/// Uniform random policy on the same layouts as [`evaluate_planner`].
pub fn evaluate_random(mode: &PropertyMode, env: &EnvSpec, episodes: usize, seeds: &[u64]) -> Result<Vec<SeedMetrics>> {
    let dynamics = env.dynamics;
    run_seeds(seeds, episodes, |seed, i, rng| {
        let mut e = mode_env(mode, env, seed, i)?;
        e.set_dynamics(dynamics);
        Ok(random_episode(&e, rng))
    })
}

/// Plan settings of the single-step greedy comparator: one plan slot, no
/// refinement sweeps, argmax sampling.
pub fn bc_plan_config(base: &PlanConfig) -> PlanConfig {
    PlanConfig {
        horizon: 1,
        iters: 0,
        masks_per_step: 1,
        temperature: Temperature::Greedy,
        execution: Execution::ExecuteAll,
        ..base.clone()
    }
}

/// Success rate of the greedy next-action comparator on `env` layouts.
pub fn bc_reference(model: Arc<dyn ActionModel>, env: &EnvSpec, base: &PlanConfig, episodes: usize, seeds: &[u64]) -> Result<f64> {
    let per_seed = evaluate_planner(
        &PropertyMode::Standard,
        env,
        &[model],
        CompositionArm::Composed,
        &Planner::Gibbs,
        &bc_plan_config(base),
        episodes,
        seeds,
    )?;
    Ok(pooled(&per_seed).0)
}

/// Energies of corrupted optimal prefixes pooled over `trials` evaluation
/// layouts whose optimal plan is at least `horizon` long.
pub fn landscape_study(energy: &EnergyFn, env: &EnvSpec, horizon: usize, levels: &[f64], trials: usize, seed: u64) -> Result<Vec<LandscapeRow>> {
    let mut per_level: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); levels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, LANDSCAPE_STREAM));
    let mut index = 0;
    let mut used = 0;
    while used < trials {
        let e = eval_env(env, stream_seed(seed, LANDSCAPE_STREAM), index)?;
        index += 1;
        if optimal_plan(&e)?.len() < horizon {
            continue;
        }
        for (k, row) in landscape(energy, &e, horizon, levels, 1, &mut rng)?.into_iter().enumerate() {
            per_level[k].push(row.mean_energy);
        }
        used += 1;
    }
    Ok(levels
        .iter()
        .zip(&per_level)
        .map(|(&level, xs)| {
            let (mean, stderr) = mean_stderr(xs);
            LandscapeRow {
                noise_level: level,
                mean_energy: mean,
                stderr,
                trials: xs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iters: usize,
    pub success_rate: f64,
    pub stderr: f64,
}

/// Everything needed to rerun an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ExperimentSpec,
    pub spec_digest: String,
    pub train_digest: String,
    pub checkpoints: Vec<PathBuf>,
    pub checkpoint_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub name: String,
    pub planner: String,
    pub mode: String,
    pub episodes_per_seed: usize,
    /// Mean of the per-seed success rates.
    pub success_rate: f64,
    /// Standard error of the per-seed success rates.
    pub stderr: f64,
    pub mean_steps: f64,
    pub lava_entries: usize,
    pub per_seed: Vec<SeedMetrics>,
    pub iteration_curve: Vec<CurvePoint>,
    pub landscape: Vec<LandscapeRow>,
    pub manifest: Option<Manifest>,
}

impl MetricsReport {
    pub fn from_seeds(name: &str, planner: &str, mode: &str, per_seed: Vec<SeedMetrics>) -> MetricsReport {
        let rates: Vec<f64> = per_seed.iter().map(|s| s.success_rate).collect();
        let (success_rate, stderr) = mean_stderr(&rates);
        let episodes: usize = per_seed.iter().map(|s| s.episodes).sum();
        let mean_steps = per_seed.iter().map(|s| s.mean_steps * s.episodes as f64).sum::<f64>() / episodes.max(1) as f64;
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            name: name.to_string(),
            planner: planner.to_string(),
            mode: mode.to_string(),
            episodes_per_seed: per_seed.first().map_or(0, |s| s.episodes),
            success_rate,
            stderr,
            mean_steps,
            lava_entries: per_seed.iter().map(|s| s.lava_hits).sum(),
            per_seed,
            iteration_curve: Vec::new(),
            landscape: Vec::new(),
            manifest: None,
        }
    }

    /// Check the schema version and value ranges.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(HarnessError::Schema(format!(
                "schema version {} (expected {REPORT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.success_rate) || self.per_seed.iter().any(|s| !in_unit(s.success_rate)) {
            return Err(HarnessError::Schema("success rate outside [0, 1]".into()));
        }
        if self.iteration_curve.iter().any(|c| !in_unit(c.success_rate)) {
            return Err(HarnessError::Schema("curve success rate outside [0, 1]".into()));
        }
        if self.stderr.is_nan() || self.stderr < 0.0 {
            return Err(HarnessError::Schema("stderr must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == REPORT_SCHEMA_VERSION as u64 => {}
            other => return Err(HarnessError::Schema(format!("unsupported schema version {other:?}"))),
        }
        let report: MetricsReport = serde_json::from_value(value)?;
        report.validate()?;
        Ok(report)
    }

    /// One row per seed plus a pooled `all` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "planner", "mode", "seed", "episodes", "success_rate", "stderr", "mean_steps", "lava_hits"])?;
        for s in &self.per_seed {
            w.write_record([
                self.name.clone(),
                self.planner.clone(),
                self.mode.clone(),
                s.seed.to_string(),
                s.episodes.to_string(),
                format!("{}", s.success_rate),
                String::new(),
                format!("{}", s.mean_steps),
                s.lava_hits.to_string(),
            ])?;
        }
        w.write_record([
            self.name.clone(),
            self.planner.clone(),
            self.mode.clone(),
            "all".into(),
            (self.episodes_per_seed * self.per_seed.len()).to_string(),
            format!("{}", self.success_rate),
            format!("{}", self.stderr),
            format!("{}", self.mean_steps),
            self.lava_entries.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Write `metrics.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), self.to_json())?;
        self.write_csv(fs::File::create(dir.join("metrics.csv"))?)?;
        Ok(())
    }
}

fn as_dyn(models: &[Arc<MaskedSeqModel<f32>>]) -> Vec<Arc<dyn ActionModel>> {
    models.iter().map(|m| m.clone() as Arc<dyn ActionModel>).collect()
}

/// Evaluate `spec` with the checkpoints at `paths`.
pub fn evaluate(spec: &ExperimentSpec, paths: &[PathBuf]) -> Result<MetricsReport> {
    spec.validate()?;
    let models = load_models(paths)?;
    let mut report = evaluate_models(spec, &as_dyn(&models))?;
    report.manifest = Some(Manifest {
        spec: spec.clone(),
        spec_digest: spec.digest(),
        train_digest: spec.train.digest(),
        checkpoints: paths.to_vec(),
        checkpoint_digests: paths.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
    });
    Ok(report)
}

/// Evaluate `spec` with in-memory models.
pub fn evaluate_models(spec: &ExperimentSpec, models: &[Arc<dyn ActionModel>]) -> Result<MetricsReport> {
    let per_seed = evaluate_planner(
        &spec.mode,
        &spec.env,
        models,
        CompositionArm::Composed,
        &spec.planner,
        &spec.plan,
        spec.episodes,
        &spec.seeds,
    )?;
    Ok(MetricsReport::from_seeds(&spec.name, spec.planner.name(), spec.mode.name(), per_seed))
}

/// Rerun the evaluation recorded in `manifest`, checking that the
/// checkpoints are unchanged.
pub fn replay(manifest: &Manifest) -> Result<MetricsReport> {
    for (p, d) in manifest.checkpoints.iter().zip(&manifest.checkpoint_digests) {
        if !p.exists() {
            return Err(HarnessError::CheckpointMissing(p.clone()));
        }
        if file_digest(p)? != *d {
            return Err(HarnessError::Config(format!("checkpoint {} changed since the report", p.display())));
        }
    }
    evaluate(&manifest.spec, &manifest.checkpoints)
}

/// Success over a list of sweep counts, same layouts at every point.
pub fn iteration_curve(spec: &ExperimentSpec, models: &[Arc<dyn ActionModel>], iters: &[usize]) -> Result<Vec<CurvePoint>> {
    iters
        .iter()
        .map(|&n| {
            let plan = PlanConfig { iters: n, ..spec.plan.clone() };
            let per_seed = evaluate_planner(&spec.mode, &spec.env, models, CompositionArm::Composed, &spec.planner, &plan, spec.episodes, &spec.seeds)?;
            let (p, se) = pooled(&per_seed);
            Ok(CurvePoint {
                iters: n,
                success_rate: p,
                stderr: se,
            })
        })
        .collect()
}

/// Gibbs, CEM and random shooting on the same layouts, in that order.
pub fn ablation(spec: &ExperimentSpec, models: &[Arc<dyn ActionModel>]) -> Result<Vec<MetricsReport>> {
    [Planner::Gibbs, Planner::cem(), Planner::shooting()]
        .iter()
        .map(|planner| {
            let per_seed = evaluate_planner(&spec.mode, &spec.env, models, CompositionArm::Composed, planner, &spec.plan, spec.episodes, &spec.seeds)?;
            Ok(MetricsReport::from_seeds(&spec.name, planner.name(), spec.mode.name(), per_seed))
        })
        .collect()
}

/// Composed energy plus each single model on the full-obstacle layouts.
pub fn composition_study(spec: &ExperimentSpec, models: &[Arc<dyn ActionModel>]) -> Result<Vec<MetricsReport>> {
    [
        ("composed", CompositionArm::Composed),
        ("single_0", CompositionArm::Single(0)),
        ("single_1", CompositionArm::Single(1)),
    ]
    .iter()
    .map(|(label, arm)| {
        let per_seed = evaluate_planner(&PropertyMode::Composition, &spec.env, models, *arm, &spec.planner, &spec.plan, spec.episodes, &spec.seeds)?;
        Ok(MetricsReport::from_seeds(&format!("{}_{label}", spec.name), spec.planner.name(), "composition", per_seed))
    })
    .collect()
}

/// Adaptation success for each lava tier, on the same base layouts.
pub fn adaptation_study(spec: &ExperimentSpec, models: &[Arc<dyn ActionModel>], tiers: &[usize]) -> Result<Vec<MetricsReport>> {
    tiers
        .iter()
        .map(|&max_lava| {
            let mode = PropertyMode::Adaptation { max_lava };
            let per_seed = evaluate_planner(&mode, &spec.env, models, CompositionArm::Composed, &spec.planner, &spec.plan, spec.episodes, &spec.seeds)?;
            Ok(MetricsReport::from_seeds(&format!("{}_lava{max_lava}", spec.name), spec.planner.name(), "adaptation", per_seed))
        })
        .collect()
}
