use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use edgewbc_core::check;
use edgewbc_core::controller::{ReplayLevel, Scheme};
use edgewbc_core::harness::metrics::{write_results_csv, ResultRow};
use edgewbc_core::harness::sweep::{run_sweep, summarize, write_summary_csv, Grid};
use edgewbc_core::harness::{run_episode, ChannelSpec, EpisodeConfig, EpisodeError, PushForce, PushSpec, TaskChoice};
use edgewbc_core::netsim::{generate_trace, Preset};

const EXIT_FAULT: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "edgewbc", version, about = "Remote and locally-assisted whole-body control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Balancing,
    Walking,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Pr,
    La,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its metrics and per-cycle log.
    Run {
        /// JSON config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        /// ideal, constant:SECONDS, preset:NAME[:SEED] or trace:PATH.
        #[arg(long)]
        channel: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        /// Absolute push on the base in newtons instead of the weight-scaled default.
        #[arg(long, conflicts_with = "no_push")]
        push_newtons: Option<f64>,
        #[arg(long)]
        no_push: bool,
        /// Replay the stale torque instead of the stale accelerations (PR only).
        #[arg(long)]
        replay_tau: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a grid of episodes and write per-episode and per-group tables.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a round-trip delay trace from a scenario preset.
    TraceGen {
        #[arg(long)]
        preset: Preset,
        /// Seconds.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the dynamics and QP oracle suites.
    Check {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        qp_instances: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Fault(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Fault(e.into())
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

#[allow(clippy::too_many_arguments)]
fn episode_config(
    config: Option<PathBuf>,
    task: Option<TaskArg>,
    controller: Option<ControllerArg>,
    channel: Option<String>,
    seed: Option<u64>,
    duration: Option<f64>,
    push_newtons: Option<f64>,
    no_push: bool,
    replay_tau: bool,
) -> Result<EpisodeConfig, Failure> {
    let scheme = controller.map(|c| match c {
        ControllerArg::Pr => Scheme::Pr,
        ControllerArg::La => Scheme::La,
    });
    let task = task.map(|t| match t {
        TaskArg::Balancing => TaskChoice::Balancing,
        TaskArg::Walking => TaskChoice::Walking,
    });
    let mut cfg = match config {
        Some(path) => {
            let mut cfg = EpisodeConfig::load(&path).map_err(config_err)?;
            if let Some(t) = task {
                cfg.task = t;
            }
            if let Some(s) = scheme {
                cfg.controller = s;
            }
            cfg
        }
        None => {
            let (Some(t), Some(s)) = (task, scheme) else {
                return Err(config_err(anyhow::anyhow!("without --config, both --task and --controller are required")));
            };
            EpisodeConfig::new(t, s)
        }
    };
    if let Some(ch) = channel {
        cfg.channel = ChannelSpec::parse(&ch).map_err(config_err)?;
    }
    cfg.apply_env().map_err(config_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if duration.is_some() {
        cfg.duration = duration;
    }
    if let Some(n) = push_newtons {
        cfg.push = Some(PushSpec {
            force: PushForce::Newtons(n),
            ..cfg.push.unwrap_or_default()
        });
    }
    if no_push {
        cfg.push = None;
    }
    if replay_tau {
        cfg.pr_replay = ReplayLevel::Tau;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn run(cfg: EpisodeConfig, out: &Path) -> Result<(), Failure> {
    let metrics = match run_episode(&cfg) {
        Ok(m) => m,
        Err(e @ (EpisodeError::Config(_) | EpisodeError::Plan(_))) => return Err(config_err(e)),
        Err(e) => return Err(e.into()),
    };
    create_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let label = cfg.channel.label();
    let row = ResultRow::from_metrics("run", cfg.task.name(), cfg.controller.name(), &label, cfg.channel.constant_delay(), cfg.seed, &metrics);
    write_results_csv(create(&out.join("metrics.csv"))?, [&row])?;
    metrics.write_log_csv(create(&out.join("log.csv"))?)?;
    metrics.write_discrepancy_csv(create(&out.join("discrepancy.csv"))?)?;
    println!(
        "{} {} over {}: com_error {:.4e} m, violation {:.4e} m/s^2, {} cycles",
        cfg.task.name(),
        cfg.controller.name(),
        label,
        metrics.com_error_avg,
        metrics.violation_avg,
        metrics.cycles
    );
    if let Some(fall) = &metrics.fall {
        println!("fell at {:.3} s: {}", fall.time, fall.reason);
        return Err(Failure::Fault(anyhow::anyhow!("episode ended in a fall")));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep(grid: &Path, jobs: usize, out: &Path) -> Result<(), Failure> {
    let grid = Grid::load(grid).map_err(config_err)?;
    let points = grid.expand();
    if points.is_empty() {
        return Err(config_err(anyhow::anyhow!("grid expands to no episodes")));
    }
    eprintln!("running {} episodes on {jobs} threads", points.len());
    let rows = run_sweep(&points, jobs);
    let summary = summarize(&points, &rows);
    create_dir(out)?;
    write_results_csv(create(&out.join("results.csv"))?, &rows)?;
    write_summary_csv(create(&out.join("summary.csv"))?, &summary)?;
    for s in &summary {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4e}"));
        println!(
            "{:<32} success {:>3}/{:<3} com_error {} violation {}",
            s.group,
            s.successes,
            s.trials,
            fmt(s.com_error),
            fmt(s.violation)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn trace_gen(preset: Preset, duration: f64, seed: u64, out: &Path) -> Result<(), Failure> {
    let trace = generate_trace(preset, duration, seed).map_err(config_err)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    trace.save(out)?;
    println!("wrote {} slots to {}", trace.times.len(), out.display());
    Ok(())
}

fn run_checks(seed: u64, qp_instances: usize) -> Result<(), Failure> {
    let lines = check::run_all(seed, qp_instances);
    for l in &lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    if failed > 0 {
        return Err(Failure::Fault(anyhow::anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            task,
            controller,
            channel,
            seed,
            duration,
            push_newtons,
            no_push,
            replay_tau,
            out,
        } => episode_config(config, task, controller, channel, seed, duration, push_newtons, no_push, replay_tau)
            .and_then(|cfg| run(cfg, &out)),
        Command::Sweep { grid, jobs, out } => sweep(&grid, jobs, &out),
        Command::TraceGen { preset, duration, seed, out } => trace_gen(preset, duration, seed, &out),
        Command::Check { seed, qp_instances } => run_checks(seed, qp_instances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Fault(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAULT)
        }
    }
}
