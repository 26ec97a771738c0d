//! Command-line surface: dataset collection, model training, open-loop model
//! evaluation, single verbose episodes, and multi-episode benchmarks.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ria::config::{apply_env, apply_file, AgentVariant, MapSelection, ReasonerKind, RunConfig};
use ria::harness::{run_benchmark, run_episode, summary_table};
use ria::sim::map::MapKind;
use ria::sim::WorldConfig;
use ria::wm::dataset::{load_records, prepare, save_records, CollectConfig};
use ria::wm::eval::constant_velocity_metrics;
use ria::wm::{
    eval_prediction, gradient_check, load_checkpoint, save_checkpoint, train, TrainConfig,
    WmConfig, WorldModel,
};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "ria", about = "Closed-loop driving agent with learned rollout verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert-plus-noise transitions in the simulator.
    Collect(CollectArgs),
    /// Train the world model on a collected dataset.
    Train(TrainArgs),
    /// Open-loop prediction quality of a checkpoint on held-out data.
    EvalWm(EvalArgs),
    /// Run a single episode with a verbose decision log.
    Run(RunArgs),
    /// Run an episode set and emit summary files.
    Benchmark(BenchArgs),
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, default_value_t = 300)]
    episodes: usize,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    max_steps: u64,
    #[arg(long, default_value_t = 30)]
    vehicles: usize,
    #[arg(long, default_value_t = 8)]
    pedestrians: usize,
    /// Output dataset (line-delimited records).
    #[arg(long)]
    out: PathBuf,
    /// Optional normalization-stats file fitted on the collected data.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 12)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    lr_decay: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fraction of episodes held out for evaluation.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    /// Use the shrunk model dimensions (fast smoke runs).
    #[arg(long, default_value_t = false)]
    tiny: bool,
    /// Log a progress line every n optimizer steps.
    #[arg(long, default_value_t = 200)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    stride: usize,
    /// Also verify analytic gradients against finite differences.
    #[arg(long, default_value_t = false)]
    grad_check: bool,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long, default_value = "scripted_only")]
    variant: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// straight | grid | boulevard | stress | mixed
    #[arg(long)]
    map: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Reasoner: scripted | scripted_single_every:<n> | external:<host:port>
    #[arg(long)]
    reasoner: Option<String>,
    /// Inject a rollout failure every n-th candidate rollout (coverage runs).
    #[arg(long)]
    fault_rollout_every: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    agent: AgentArgs,
    /// Write the step trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Output directory for summary files and per-episode traces.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(agent: &AgentArgs, episodes: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &agent.config {
        cfg = apply_file(cfg, path).context("config file")?;
    } else {
        cfg = apply_env(cfg);
    }
    cfg.variant = AgentVariant::parse(&agent.variant)
        .with_context(|| format!("unknown variant {:?}", agent.variant))?;
    if let Some(map) = &agent.map {
        match map.as_str() {
            "mixed" => cfg.maps = MapSelection::Mixed,
            "stress" => {
                cfg.sim = WorldConfig::stress();
                cfg.maps = MapSelection::Fixed(MapKind::Grid);
            }
            other => {
                let kind =
                    MapKind::parse(other).with_context(|| format!("unknown map {other:?}"))?;
                cfg.maps = MapSelection::Fixed(kind);
                cfg.sim.map = kind;
            }
        }
    }
    if let Some(cp) = &agent.checkpoint {
        cfg.checkpoint = Some(cp.clone());
    }
    if let Some(r) = &agent.reasoner {
        cfg.reasoner = match r.as_str() {
            "scripted" => ReasonerKind::Scripted,
            other => {
                if let Some(n) = other.strip_prefix("scripted_single_every:") {
                    ReasonerKind::ScriptedSingleEvery(n.parse().context("reasoner cadence")?)
                } else if let Some(ep) = other.strip_prefix("external:") {
                    ReasonerKind::External(ep.to_string())
                } else {
                    bail!("unknown reasoner {other:?}");
                }
            }
        };
    }
    cfg.fault.rollout_failure_every = agent.fault_rollout_every;
    cfg.seed = agent.seed;
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    cfg.validate().context("config")?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig) -> Result<Option<Arc<WorldModel>>> {
    match (&cfg.checkpoint, cfg.variant) {
        (Some(path), AgentVariant::RiaFull) => {
            let f = File::open(path).with_context(|| format!("checkpoint {}", path.display()))?;
            let (params, stats) = load_checkpoint(BufReader::new(f)).context("checkpoint")?;
            Ok(Some(Arc::new(WorldModel::new(params, stats))))
        }
        _ => Ok(None),
    }
}

fn cmd_collect(a: CollectArgs) -> Result<()> {
    let cfg = CollectConfig {
        episodes: a.episodes,
        epsilon: a.epsilon,
        seed: a.seed,
        max_steps: a.max_steps,
        n_vehicles: a.vehicles,
        n_pedestrians: a.pedestrians,
        ..CollectConfig::default()
    };
    let (records, stats) = ria::wm::collect_dataset(&cfg);
    let f = File::create(&a.out).with_context(|| format!("create {}", a.out.display()))?;
    save_records(BufWriter::new(f), &records).context("write dataset")?;
    println!(
        "collected {} transitions over {} episodes ({} perturbed steps, {} failure episodes, {} near-failure records)",
        records.len(),
        stats.episodes,
        stats.perturbed_steps,
        stats.failure_episodes,
        stats.near_failure_records
    );
    if let Some(path) = a.stats_out {
        let prep = prepare(&records, None);
        let f = File::create(&path)?;
        prep.stats.save(BufWriter::new(f)).context("write stats")?;
        println!("normalization stats written to {}", path.display());
    }
    println!("dataset written to {}", a.out.display());
    Ok(())
}

fn split_holdout<T>(mut episodes: Vec<T>, frac: f64) -> (Vec<T>, Vec<T>) {
    let n_hold = ((episodes.len() as f64 * frac).round() as usize).clamp(1, episodes.len() / 2 + 1);
    let hold = episodes.split_off(episodes.len().saturating_sub(n_hold));
    (episodes, hold)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let f = File::open(&a.data).with_context(|| format!("open {}", a.data.display()))?;
    let records = load_records(BufReader::new(f)).context("read dataset")?;
    let raw_episodes = ria::wm::dataset::episodes_from_records(&records);
    println!("loaded {} transitions in {} episodes", records.len(), raw_episodes.len());

    let prep_all = prepare(&records, None);
    let (train_eps, _) = split_holdout(prep_all.episodes.clone(), a.holdout);
    let data =
        ria::wm::dataset::PreparedDataset { episodes: train_eps, stats: prep_all.stats.clone() };

    let cfg = if a.tiny { WmConfig::tiny() } else { WmConfig::default() };
    let tc = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        lr_decay: a.lr_decay,
        seed: a.seed,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    let out = train(cfg, &data, &tc).context("training")?;
    println!(
        "trained: first-batch loss {:.4}, final loss {:.4}",
        out.loss_history.first().copied().unwrap_or(f64::NAN),
        out.loss_history.last().copied().unwrap_or(f64::NAN)
    );

    let f = File::create(&a.out)?;
    save_checkpoint(BufWriter::new(f), &out.params, &prep_all.stats).context("write checkpoint")?;
    println!("checkpoint written to {}", a.out.display());

    // held-out readout in raw units
    let (_, hold_raw) = split_holdout(raw_episodes, a.holdout);
    let wm = WorldModel::new(out.params, prep_all.stats);
    let m = eval_prediction(&wm, &hold_raw, 5);
    let cv = constant_velocity_metrics(&hold_raw, wm.params.cfg.warmup, wm.params.cfg.horizon, 0.1, 5);
    println!(
        "holdout ({} windows): ADE {:.3} m  FDE {:.3} m  yawRMSE {:.2} deg  velRMSE {:.3} m/s",
        m.n_windows, m.ade, m.fde, m.yaw_rmse_deg, m.vel_rmse
    );
    println!("constant-velocity reference: ADE {:.3} m  FDE {:.3} m", cv.ade, cv.fde);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let f = File::open(&a.checkpoint)?;
    let (params, stats) = load_checkpoint(BufReader::new(f)).context("checkpoint")?;
    let wm = WorldModel::new(params, stats);
    let f = File::open(&a.data)?;
    let records = load_records(BufReader::new(f)).context("dataset")?;
    let episodes = ria::wm::dataset::episodes_from_records(&records);

    let m = eval_prediction(&wm, &episodes, a.stride);
    let cv = constant_velocity_metrics(
        &episodes,
        wm.params.cfg.warmup,
        wm.params.cfg.horizon,
        0.1,
        a.stride,
    );
    println!("windows evaluated: {}", m.n_windows);
    println!("ADE @ 1 s          {:.3} m", m.ade);
    println!("FDE @ 1 s          {:.3} m", m.fde);
    println!("Yaw RMSE @ 1 s     {:.2} deg", m.yaw_rmse_deg);
    println!("Velocity RMSE @ 1s {:.3} m/s", m.vel_rmse);
    println!("CV reference: ADE {:.3} m, FDE {:.3} m", cv.ade, cv.fde);

    if a.grad_check {
        let prep = prepare(&records, Some(wm.stats.clone()));
        let cfg = &wm.params.cfg;
        let ep = prep
            .episodes
            .iter()
            .find(|e| e.len() >= cfg.warmup + cfg.horizon)
            .context("no episode long enough for a gradient-check window")?;
        let states: Vec<_> = ep[..cfg.warmup + cfg.horizon].iter().map(|(s, _)| *s).collect();
        let actions: Vec<_> = ep[..cfg.warmup + cfg.horizon - 1].iter().map(|(_, a)| *a).collect();
        let report = gradient_check(&wm.params, &states, &actions, 100, 17);
        let worst = report.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        println!("gradient check: {} samples, worst relative error {:.2e}", report.len(), worst);
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a.agent, None)?;
    let wm = load_model(&cfg)?;
    let (result, trace) = run_episode(&cfg, wm, 0, cfg.seed, true)
        .map_err(|e| anyhow::anyhow!("episode failed to start: {e}"))?;

    let bytes = trace.expect("trace requested");
    let records = ria::sim::trace::read_trace(BufReader::new(&bytes[..]))?;
    for r in &records {
        if let Some(v) = &r.verdict {
            println!(
                "step {:>5}: {} -> {} [{}] q={} rollouts={} costs={:?}",
                r.step, v.template, v.selected_label, v.fallback_reason, v.q, v.rollouts, v.costs
            );
        }
    }
    println!(
        "result: termination={:?} completion={:.3} arrived={} collided={} steps={}",
        result.termination, result.route_completion, result.arrived, result.collided, result.steps
    );
    println!(
        "events: red_light={} stop_sign={} offroad={} hard_brake={} high_jerk={} mean|jerk|={:.2}",
        result.red_light,
        result.stop_sign,
        result.offroad,
        result.hard_brake,
        result.high_jerk,
        result.mean_abs_jerk
    );
    if let Some(path) = a.trace {
        std::fs::write(&path, &bytes)?;
        println!("trace written to {}", path.display());
    }
    Ok(())
}

fn cmd_benchmark(a: BenchArgs) -> Result<()> {
    let cfg = resolve_config(&a.agent, Some(a.episodes))?;
    let wm = load_model(&cfg)?;
    let out = run_benchmark(&cfg, wm, a.out.as_deref())?;
    print!("{}", summary_table(cfg.variant.name(), &out.summary));
    if out.skipped > 0 {
        eprintln!("{} episodes skipped at spawn", out.skipped);
    }
    if let Some(dir) = &a.out {
        println!("summary files in {}", dir.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect(a) => cmd_collect(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalWm(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
