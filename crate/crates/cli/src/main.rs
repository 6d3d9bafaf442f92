//! `leap`: generate data, train, plan, evaluate and run the property studies
//! from a plain-text experiment config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leap_core::energy::save_landscape_csv;
use leap_core::harness::{
    ablation, adaptation_study, bc_plan_config, composition_study, energy_for, evaluate, eval_env, evaluate_models,
    evaluate_planner, iteration_curve,
    landscape_study, parse_execution, parse_temperature, prepare_datasets, train_models, write_loss_csv,
    CompositionArm, ExperimentSpec, HarnessError, MetricsReport, PropertyMode,
};
use leap_core::codec::make_plan_template;
use leap_core::model::{save_checkpoint, ActionModel};
use leap_core::oracle::StateVec;
use leap_core::planner::{gibbs_plan, PlanError, Planner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "leap", version, about = "Masked-model iterative planning in gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config with [env] [data] [train] [plan] [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use this single evaluation seed (also seeds data and training).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// A number, `greedy`, or `start..end` for a linear anneal.
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long, value_parser = ["all", "replan"])]
    execution: Option<String>,
    /// Model checkpoints; defaults to `<out-dir>/model<i>.ckpt`.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Property {
    Adaptation,
    Generalization,
    Composition,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training dataset(s).
    GenData(Common),
    /// Train model(s); writes checkpoints and loss.csv.
    Train(Common),
    /// Plan once on the first evaluation layout; writes trace.jsonl.
    Plan(Common),
    /// Evaluate; writes metrics.json and metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also record success at these sweep counts, e.g. `1,5,10`.
        #[arg(long, value_delimiter = ',')]
        curve: Vec<usize>,
    },
    /// Energy of corrupted optimal plans; writes landscape.csv.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Gibbs, CEM and random shooting head to head.
    Ablate(Common),
    /// Run one property study.
    Property {
        #[arg(value_enum)]
        which: Property,
        #[command(flatten)]
        common: Common,
    },
}

fn load_spec(c: &Common) -> Result<ExperimentSpec, HarnessError> {
    let mut spec = match &c.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = c.seed {
        spec.seeds = vec![s];
        spec.data.seed = s;
        spec.train_seed = s;
        spec.plan.seed = s;
    }
    if let Some(n) = c.episodes {
        spec.episodes = n;
    }
    if let Some(n) = c.iters {
        spec.plan.iters = n;
    }
    if let Some(h) = c.horizon {
        spec.plan.horizon = h;
        spec.plan.masks_per_step = spec.plan.masks_per_step.min(h);
    }
    if let Some(t) = &c.temperature {
        spec.plan.temperature = parse_temperature(t)?;
    }
    if let Some(e) = &c.execution {
        spec.plan.execution = parse_execution(e)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn parts(spec: &ExperimentSpec) -> usize {
    match spec.mode {
        PropertyMode::Composition => 2,
        _ => 1,
    }
}

fn checkpoints(c: &Common, n: usize) -> Vec<PathBuf> {
    if c.checkpoint.is_empty() {
        (0..n).map(|i| c.out_dir.join(format!("model{i}.ckpt"))).collect()
    } else {
        c.checkpoint.clone()
    }
}

fn train(spec: &ExperimentSpec, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out)?;
    let datasets = prepare_datasets(spec)?;
    let trained = train_models(spec, &datasets, Some(out))?;
    write_loss_csv(&trained.outcomes, &out.join("loss.csv"))?;
    let digest = spec.train.digest();
    trained
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = out.join(format!("model{i}.ckpt"));
            save_checkpoint(m, &digest, spec.train.max_epochs, &p)?;
            Ok(p)
        })
        .collect()
}

type Models = Vec<Arc<dyn ActionModel>>;

fn models(c: &Common, spec: &ExperimentSpec) -> Result<(Vec<PathBuf>, Models), HarnessError> {
    let paths = checkpoints(c, parts(spec));
    let loaded = leap_core::harness::load_models(&paths)?;
    Ok((paths, loaded.into_iter().map(|m| m as Arc<dyn ActionModel>).collect()))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json"));
}

fn save_reports(reports: &[MetricsReport], out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(reports)?)?;
    let mut buf = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let mut one = Vec::new();
        r.write_csv(&mut one)?;
        let text = String::from_utf8(one).expect("csv is utf-8");
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |x| x.1) };
        buf.extend_from_slice(body.as_bytes());
    }
    fs::write(out.join("metrics.csv"), buf)?;
    for r in reports {
        print_json(&serde_json::json!({"name": r.name, "planner": r.planner, "success_rate": r.success_rate, "stderr": r.stderr}));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData(c) => {
            let spec = load_spec(&c)?;
            fs::create_dir_all(&c.out_dir)?;
            for (i, ds) in prepare_datasets(&spec)?.iter().enumerate() {
                let p = c.out_dir.join(format!("dataset{i}.bin"));
                ds.save(&p)?;
                print_json(&serde_json::json!({"dataset": p, "demos": ds.len(), "actions": ds.action_count()}));
            }
        }
        Command::Train(c) => {
            let spec = load_spec(&c)?;
            for p in train(&spec, &c.out_dir)? {
                print_json(&serde_json::json!({"checkpoint": p}));
            }
        }
        Command::Plan(c) => {
            let spec = load_spec(&c)?;
            let (_, models) = models(&c, &spec)?;
            let seed = spec.seeds[0];
            let env = eval_env(spec.test_env(), seed, 0)?;
            let energy = energy_for(&spec.mode, &models, &env, CompositionArm::Composed)?;
            let template = make_plan_template(&[], StateVec::of_env(&env), spec.plan.horizon, spec.plan.ctx_len, Arc::new(env.layout()))
                .map_err(PlanError::from)?;
            let (_, trace) = gibbs_plan(&energy, &template, &spec.plan, &mut ChaCha8Rng::seed_from_u64(seed))?;
            fs::create_dir_all(&c.out_dir)?;
            trace.save_jsonl(&c.out_dir.join("trace.jsonl"))?;
            trace.write_jsonl(std::io::stdout())?;
        }
        Command::Eval { common: c, curve } => {
            let spec = load_spec(&c)?;
            let (paths, models) = models(&c, &spec)?;
            let mut report = evaluate(&spec, &paths)?;
            if !curve.is_empty() {
                report.iteration_curve = iteration_curve(&spec, &models, &curve)?;
            }
            report.save(&c.out_dir)?;
            print_json(&serde_json::json!({"success_rate": report.success_rate, "stderr": report.stderr, "lava_entries": report.lava_entries}));
        }
        Command::Landscape { common: c, trials } => {
            let spec = load_spec(&c)?;
            let (_, models) = models(&c, &spec)?;
            let energy = leap_core::energy::EnergyFn::pll(models[0].clone());
            let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
            let rows = landscape_study(&energy, spec.test_env(), spec.plan.horizon, &levels, trials, spec.seeds[0])?;
            fs::create_dir_all(&c.out_dir)?;
            save_landscape_csv(&rows, &c.out_dir.join("landscape.csv"))?;
            for r in &rows {
                print_json(&serde_json::to_value(r)?);
            }
        }
        Command::Ablate(c) => {
            let spec = load_spec(&c)?;
            let (_, models) = models(&c, &spec)?;
            save_reports(&ablation(&spec, &models)?, &c.out_dir)?;
        }
        Command::Property { which, common: c } => {
            let mut spec = load_spec(&c)?;
            let reports = match which {
                Property::Adaptation => {
                    spec.mode = PropertyMode::Standard;
                    let (_, models) = models(&c, &spec)?;
                    adaptation_study(&spec, &models, &[2, 5])?
                }
                Property::Composition => {
                    spec.mode = PropertyMode::Composition;
                    let paths = checkpoints(&c, 2);
                    if paths.iter().any(|p| !p.exists()) {
                        train(&spec, &c.out_dir)?;
                    }
                    let (_, models) = models(&c, &spec)?;
                    composition_study(&spec, &models)?
                }
                Property::Generalization => {
                    if !matches!(spec.mode, PropertyMode::Generalization { .. }) {
                        return Err(HarnessError::Config("generalization needs mode = generalization and a [test_env] section".into()));
                    }
                    let (_, models) = models(&c, &spec)?;
                    let planned = evaluate_models(&spec, &models)?;
                    let greedy = evaluate_planner(
                        &spec.mode,
                        &spec.env,
                        &models,
                        CompositionArm::Composed,
                        &Planner::Gibbs,
                        &bc_plan_config(&spec.plan),
                        spec.episodes,
                        &spec.seeds,
                    )?;
                    vec![planned, MetricsReport::from_seeds(&format!("{}_greedy", spec.name), "greedy", "generalization", greedy)]
                }
            };
            save_reports(&reports, &c.out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(2)
        }
    }
}
