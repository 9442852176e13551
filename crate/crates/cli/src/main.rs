//! `scorefield` command-line driver.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime or numeric failure.

mod manifest;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use scorefield::ballworld::{self, BallState, Policy, Trajectory, WorldConfig};
use scorefield::eval::{self, MetricsReport};
use scorefield::planner::{GradientPolicy, OneBallPolicy, OrcaPolicy, RandomPolicy, SpeedBudget};
use scorefield::rewards::{self, RunningNormalizer};
use scorefield::scorenet::{self, ScoreModel, SdeKernel, TrainConfig};
use scorefield::targets::{GmmField, TargetDataset, TaskKind, TaskSpec};
use scorefield::{rng, ScoreField};

use manifest::{sidecar, RunManifest};

#[derive(Parser)]
#[command(
    name = "scorefield",
    version,
    about = "Learn target score fields and rearrange balls with them"
)]
struct Cli {
    /// JSON file with option values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a target-example dataset (or a perturbed oracle set).
    SampleTargets(SampleArgs),
    /// Train a score network on a dataset.
    TrainScore(TrainArgs),
    /// Roll out a policy and write one trajectory file per episode.
    Rollout(RolloutArgs),
    /// Compute metrics over a directory of trajectories.
    Eval(EvalArgs),
    /// Draw trajectory frames as SVG.
    Render(RenderArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Balls per colour (3 colours).
    #[arg(long)]
    per_color: Option<usize>,
    /// Jitter each sample with Gaussian noise of this std (oracle baseline).
    #[arg(long)]
    perturb_std: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Not supported; training always starts from a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    /// orca, gradient, oneball or random.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// model or analytic (GMM tasks only).
    #[arg(long)]
    field: Option<String>,
    /// Task name; defaults to the model's task.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    episodes: Option<u64>,
    /// Number of seeds; seeds 0..N are used.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_color: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    switch_period: Option<usize>,
    /// joint or rms.
    #[arg(long)]
    speed_budget: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    traj_dir: Option<PathBuf>,
    /// Ground-truth dataset for the coverage score.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Oracle dataset used to normalize pseudo-likelihoods.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    every: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Bad input from the user; maps to exit code 2.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use scorefield::Error as E;
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite(_) | E::Diverged { .. } | E::Io(_) => 3,
                _ => 2,
            };
        }
    }
    3
}

/// Option values from a JSON config file, keyed by flag name.
struct Conf(Map<String, Value>);

impl Conf {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Conf(Map::new()));
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => Ok(Conf(m)),
            Ok(_) => Err(invalid("config file must hold a JSON object")),
            Err(e) => Err(invalid(format!("config file {}: {e}", path.display()))),
        }
    }

    fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| invalid(format!("config key `{key}`: {e}"))),
        }
    }

    fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn need<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.opt(flag, key)?
            .ok_or_else(|| invalid(format!("missing required option --{key}")))
    }
}

fn parse_task(name: &str) -> Result<TaskKind> {
    name.parse::<TaskKind>().map_err(|e| invalid(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<TargetDataset> {
    TargetDataset::from_jsonl(&read(path)?)
        .with_context(|| format!("parsing dataset {}", path.display()))
}

fn sample_targets(args: SampleArgs, conf: &Conf) -> Result<()> {
    let kind = parse_task(&conf.need(args.task, "task")?)?;
    let n: usize = conf.or(args.n, "n", 10_000)?;
    let seed: u64 = conf.or(args.seed, "seed", 0)?;
    let out: PathBuf = conf.need(args.out, "out")?;
    let per_color: usize = conf.or(
        args.per_color,
        "per-color",
        WorldConfig::default().n_per_color,
    )?;
    let perturb: Option<f64> = conf.opt(args.perturb_std, "perturb-std")?;
    if n == 0 {
        return Err(invalid("--n must be positive"));
    }
    let task = TaskSpec::new(
        kind,
        WorldConfig {
            n_per_color: per_color,
            ..WorldConfig::default()
        },
    );
    task.validate()?;
    let ds = match perturb {
        None => TargetDataset::generate(&task, n, seed)?,
        Some(std) => {
            let examples = eval::oracle_baseline(&task, n, std, &mut rng::stream(seed, 1))?;
            TargetDataset {
                task: task.clone(),
                examples,
            }
        }
    };
    write(&out, &ds.to_jsonl()?)?;
    let mut m = RunManifest::new(
        "sample-targets",
        json!({"task": task, "n": n, "seed": seed, "per-color": per_color, "perturb-std": perturb}),
        vec![seed],
    );
    m.output(&out);
    m.write(&sidecar(&out, "manifest.json"))
}

/// Task and kernel stored next to a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    task: TaskSpec,
    kernel: SdeKernel,
    train: TrainConfig,
    final_loss: f64,
}

fn train_score(args: TrainArgs, conf: &Conf) -> Result<()> {
    if conf.opt(args.resume, "resume")?.is_some() {
        return Err(invalid(
            "resuming training is not supported; start a fresh run",
        ));
    }
    let data: PathBuf = conf.need(args.data, "data")?;
    let out: PathBuf = conf.need(args.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        steps: conf.or(args.steps, "steps", d.steps)?,
        rng_seed: conf.or(args.seed, "seed", d.rng_seed)?,
        batch_size: conf.or(args.batch_size, "batch-size", d.batch_size)?,
        lr: conf.or(args.lr, "lr", d.lr)?,
        hidden: conf.or(args.hidden, "hidden", d.hidden)?,
        rounds: conf.or(args.rounds, "rounds", d.rounds)?,
        ..d
    };
    cfg.validate()?;
    let ds = read_dataset(&data)?;
    let kernel = SdeKernel::default();
    let report_every = (cfg.steps / 20).max(1);
    let (model, outcome) = scorenet::train_with(&ds, &cfg, kernel, |step, loss| {
        if (step + 1) % report_every == 0 {
            eprintln!("step {:>7}  loss {loss:.6}", step + 1);
        }
    })?;
    write(&out, &model.to_checkpoint_json()?)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.loss_history.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let loss_path = sidecar(&out, "loss.csv");
    write(&loss_path, &csv)?;
    let meta = ModelMeta {
        task: ds.task.clone(),
        kernel,
        train: cfg.clone(),
        final_loss: outcome.final_loss,
    };
    let meta_path = sidecar(&out, "meta.json");
    write(&meta_path, &serde_json::to_string_pretty(&meta)?)?;
    let mut m = RunManifest::new(
        "train-score",
        json!({"train": cfg, "kernel": kernel}),
        vec![cfg.rng_seed],
    );
    m.input(&data)?;
    for p in [&out, &loss_path, &meta_path] {
        m.output(p);
    }
    m.write(&sidecar(&out, "manifest.json"))
}

fn load_model(path: &Path) -> Result<(ScoreModel, ModelMeta)> {
    let meta_path = sidecar(path, "meta.json");
    let meta: ModelMeta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| invalid(format!("model metadata {}: {e}", meta_path.display())))?;
    let model = ScoreModel::from_checkpoint_json(&read(path)?, meta.kernel)?;
    Ok((model, meta))
}

/// First line of every trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrajHeader {
    task: TaskSpec,
    policy: String,
    field: Option<String>,
    seed: u64,
    episode: u64,
}

fn traj_file_text(header: &TrajHeader, traj: &Trajectory) -> Result<String> {
    let mut text = serde_json::to_string(header)?;
    text.push('\n');
    text.push_str(&traj.to_jsonl()?);
    Ok(text)
}

fn parse_traj_file(text: &str, path: &Path) -> Result<(TrajHeader, Trajectory)> {
    let (head, rest) = text.split_once('\n').unwrap_or((text, ""));
    let header: TrajHeader = serde_json::from_str(head)
        .map_err(|e| invalid(format!("{}: line 1: {e}", path.display())))?;
    let traj = Trajectory::from_jsonl(rest).map_err(|e| match e {
        scorefield::Error::Parse { line, msg } => {
            invalid(format!("{}: line {}: {msg}", path.display(), line + 1))
        }
        e => e.into(),
    })?;
    Ok((header, traj))
}

fn rollout(args: RolloutArgs, conf: &Conf) -> Result<()> {
    let policy_name: String = conf.or(args.policy, "policy", "orca".to_string())?;
    if !["orca", "gradient", "oneball", "random"].contains(&policy_name.as_str()) {
        return Err(invalid(format!(
            "unknown policy `{policy_name}` (expected orca, gradient, oneball or random)"
        )));
    }
    let model_path: Option<PathBuf> = conf.opt(args.model, "model")?;
    let field_name: Option<String> = conf.opt(args.field, "field")?;
    let task_name: Option<String> = conf.opt(args.task, "task")?;
    let episodes: u64 = conf.or(args.episodes, "episodes", 100)?;
    let n_seeds: u64 = conf.or(args.seeds, "seeds", 5)?;
    let out: PathBuf = conf.need(args.out, "out")?;
    let switch_period: usize = conf.or(args.switch_period, "switch-period", 20)?;
    let budget: SpeedBudget = conf
        .or(args.speed_budget, "speed-budget", "rms".to_string())?
        .parse()
        .map_err(invalid)?;
    if episodes == 0 || n_seeds == 0 {
        return Err(invalid("--episodes and --seeds must be positive"));
    }

    let model = match &model_path {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let mut task = match (&task_name, &model) {
        (Some(name), Some((_, meta))) => {
            let kind = parse_task(name)?;
            if kind != meta.task.kind {
                return Err(invalid(format!(
                    "--task {kind} does not match the model's task {}",
                    meta.task.kind
                )));
            }
            meta.task.clone()
        }
        (Some(name), None) => TaskSpec::new(parse_task(name)?, WorldConfig::default()),
        (None, Some((_, meta))) => meta.task.clone(),
        (None, None) => return Err(invalid("--task is required when no --model is given")),
    };
    if let Some(k) = conf.opt(args.per_color, "per-color")? {
        task.world.n_per_color = k;
    }
    if let Some(h) = conf.opt(args.horizon, "horizon")? {
        task.world.horizon = h;
    }
    task.validate()?;

    let analytic;
    let field: Option<&dyn ScoreField> = match (field_name.as_deref(), &model) {
        (Some("analytic"), _) => {
            analytic = GmmField::for_task(&task)?;
            Some(&analytic)
        }
        (Some("model") | None, Some((m, _))) => Some(m),
        (Some("model"), None) => return Err(invalid("--field model needs --model")),
        (None, None) => None,
        (Some(other), _) => {
            return Err(invalid(format!(
                "unknown field `{other}` (expected model or analytic)"
            )))
        }
    };
    if let (Some((m, _)), Some("model") | None) = (&model, field_name.as_deref()) {
        if m.n_colors() != task.world.n_colors {
            return Err(invalid("model colour count does not match the task"));
        }
    }
    if field.is_none() && policy_name != "random" {
        return Err(invalid(format!(
            "policy `{policy_name}` needs a score field: pass --model or --field analytic"
        )));
    }
    let field_label = field_name
        .clone()
        .or_else(|| model.as_ref().map(|_| "model".to_string()));

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = RunManifest::new(
        "rollout",
        json!({
            "policy": policy_name, "field": field_label, "task": task, "episodes": episodes,
            "seeds": n_seeds, "switch-period": switch_period, "speed-budget": budget,
        }),
        (0..n_seeds).collect(),
    );
    if let Some(p) = &model_path {
        m.input(p)?;
    }
    for seed in 0..n_seeds {
        let world = WorldConfig {
            rng_seed: seed,
            ..task.world.clone()
        };
        for ep in 0..episodes {
            let mut policy: Box<dyn Policy + '_> = match (policy_name.as_str(), field) {
                ("orca", Some(f)) => {
                    let mut p = OrcaPolicy::new(f, &world);
                    p.params.budget = budget;
                    Box::new(p)
                }
                ("gradient", Some(f)) => {
                    let mut p = GradientPolicy::new(f, &world);
                    p.budget = budget;
                    Box::new(p)
                }
                ("oneball", Some(f)) => Box::new(OneBallPolicy::new(f, &world, switch_period)),
                _ => Box::new(RandomPolicy {
                    rng: rng::episode_policy(seed, ep),
                    v_max: world.v_max,
                }),
            };
            let mut traj = ballworld::rollout(&mut *policy, &world, ep)?;
            if let Some(f) = field {
                rewards::annotate(f, &mut traj, &mut RunningNormalizer::new())?;
            }
            let header = TrajHeader {
                task: TaskSpec {
                    world: world.clone(),
                    ..task.clone()
                },
                policy: policy_name.clone(),
                field: field_label.clone(),
                seed,
                episode: ep,
            };
            let path = out.join(format!("traj_s{seed}_e{ep}.jsonl"));
            write(&path, &traj_file_text(&header, &traj)?)?;
            m.output(&path);
        }
    }
    m.write(&out.join("manifest.json"))
}

fn same_task(a: &TaskSpec, b: &TaskSpec) -> bool {
    let strip = |t: &TaskSpec| TaskSpec {
        world: WorldConfig {
            rng_seed: 0,
            ..t.world.clone()
        },
        ..t.clone()
    };
    strip(a) == strip(b)
}

fn eval_cmd(args: EvalArgs, conf: &Conf) -> Result<()> {
    let dir: PathBuf = conf.need(args.traj_dir, "traj-dir")?;
    let gt_path: PathBuf = conf.need(args.gt, "gt")?;
    let oracle_path: PathBuf = conf.need(args.oracle, "oracle")?;
    let report_path: PathBuf = conf.need(args.report, "report")?;

    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("traj_") && name.ends_with(".jsonl")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no trajectory files in {}", dir.display())));
    }
    let mut m = RunManifest::new("eval", json!({}), Vec::new());
    let mut task: Option<TaskSpec> = None;
    let mut groups: BTreeMap<u64, Vec<(u64, Trajectory)>> = BTreeMap::new();
    for path in &files {
        let (header, traj) = parse_traj_file(&read(path)?, path)?;
        match &task {
            Some(t) if !same_task(t, &header.task) => {
                return Err(invalid(format!(
                    "{} holds a different task than the other trajectories",
                    path.display()
                )))
            }
            Some(_) => {}
            None => task = Some(header.task.clone()),
        }
        groups
            .entry(header.seed)
            .or_default()
            .push((header.episode, traj));
        m.input(path)?;
    }
    let task = task.expect("at least one file");
    let gt = read_dataset(&gt_path)?;
    let oracle = read_dataset(&oracle_path)?;
    for (name, ds) in [("ground-truth", &gt), ("oracle", &oracle)] {
        if ds.task.kind != task.kind || ds.task.world.n_balls() != task.world.n_balls() {
            return Err(invalid(format!(
                "{name} dataset task does not match the trajectories"
            )));
        }
    }
    m.input(&gt_path)?;
    m.input(&oracle_path)?;
    let groups: Vec<(u64, Vec<Trajectory>)> = groups
        .into_iter()
        .map(|(seed, mut v)| {
            v.sort_by_key(|(ep, _)| *ep);
            (seed, v.into_iter().map(|(_, t)| t).collect())
        })
        .collect();
    let report: MetricsReport = eval::evaluate(&groups, &task, &gt.examples, &oracle.examples)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write(&report_path, &text)?;
    let csv_path = sidecar(&report_path, "pl.csv");
    write(&csv_path, &report.pl_curve.to_csv())?;
    m.seeds = report.seeds.clone();
    m.config =
        json!({"traj-dir": dir, "gt": gt_path, "oracle": oracle_path, "report": report_path});
    m.output(&report_path);
    m.output(&csv_path);
    m.write(&sidecar(&report_path, "manifest.json"))
}

fn render_cmd(args: RenderArgs, conf: &Conf) -> Result<()> {
    let traj_path: PathBuf = conf.need(args.traj, "traj")?;
    let every: usize = conf.or(args.every, "every", 10)?;
    let out_dir: PathBuf = conf.need(args.out_dir, "out-dir")?;
    if every == 0 {
        return Err(invalid("--every must be positive"));
    }
    let (header, traj) = parse_traj_file(&read(&traj_path)?, &traj_path)?;
    let states: Vec<&BallState> = traj.states();
    if states.is_empty() {
        return Err(invalid("trajectory has no states"));
    }
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut m = RunManifest::new(
        "render",
        json!({"traj": traj_path, "every": every}),
        vec![header.seed],
    );
    m.input(&traj_path)?;
    for step in render::frame_steps(states.len(), every) {
        let path = out_dir.join(format!("frame_{step:04}.svg"));
        write(&path, &render::svg(states[step], &header.task.world))?;
        m.output(&path);
    }
    m.write(&out_dir.join("manifest.json"))
}

fn run(cli: Cli) -> Result<()> {
    let conf = Conf::load(cli.config.as_deref())?;
    match cli.command {
        Command::SampleTargets(a) => sample_targets(a, &conf),
        Command::TrainScore(a) => train_score(a, &conf),
        Command::Rollout(a) => rollout(a, &conf),
        Command::Eval(a) => eval_cmd(a, &conf),
        Command::Render(a) => render_cmd(a, &conf),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
