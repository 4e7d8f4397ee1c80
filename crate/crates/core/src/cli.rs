//! The `rownav` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::bench::{self, Agent, SweepRow};
use crate::config::{ConfigBuilder, Preset, RunConfig};
use crate::env::{write_trajectory, Env, EnvSeeds, VecEnv};
use crate::geometry::Pose2;
use crate::ppo::{self, Checkpoint, Control, TrainOutput, Trainer};
use crate::rng::derive_seed;
use crate::rowmap::{self, RowMap};
use crate::sensor::{self, PointCloud};
use crate::world::{self, PlantationMap};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "ROWNAV_OUT";

#[derive(Debug, Parser)]
#[command(name = "rownav", version, about = "Crop-row navigation lab: simulate, train and evaluate LiDAR row-following policies")]
pub struct Cli {
    /// Worker threads for environment stepping and evaluation.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Named settings applied before the config file.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Override a config value, e.g. `--set env.history_len=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a steering policy with PPO.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a scripted agent over one or more row configurations.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "agent")]
        checkpoint: Option<PathBuf>,
        /// Built-in agent: scripted-zero or scripted-constant:OMEGA.
        #[arg(long)]
        agent: Option<String>,
        /// `standard`, `config`, or a list like `0:0,1.8:0.2` of frequency:amplitude pairs.
        #[arg(long, default_value = "config")]
        sweep: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        row_length: Option<f64>,
        /// Use the policy mean instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise and render a point cloud (.xyz), row map (text grid) or plantation map (.json).
    Inspect {
        file: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the row map as a binary graymap.
        #[arg(long, value_name = "FILE")]
        pgm: Option<PathBuf>,
        /// Pixels per cell in the graymap.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        /// Write the row map as a text grid.
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// Print statistics only.
        #[arg(long)]
        quiet: bool,
    },
    /// Generate a plantation map as JSON.
    GenMap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one LiDAR sweep and write it as an .xyz cloud.
    GenCloud {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Plantation map; generated from the config when omitted.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Sensor pose; defaults to the row start facing along the row.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        y: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot mean-return curves from one or more metrics CSV files.
    PlotReturns {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print or write the effective configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 2,
            error: e.into(),
        })
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 1,
            error: e.into(),
        })
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow!("--threads must be at least 1")).usage();
        }
        // a second initialisation (e.g. in tests) keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train { cfg, iterations, out } => cmd_train(&cfg, iterations, out),
        Command::Eval {
            cfg,
            checkpoint,
            agent,
            sweep,
            trials,
            row_length,
            deterministic,
            out,
        } => cmd_eval(EvalArgs {
            cfg,
            checkpoint,
            agent,
            sweep,
            trials,
            row_length,
            deterministic,
            out,
        }),
        Command::Inspect {
            file,
            cfg,
            pgm,
            scale,
            grid,
            quiet,
        } => cmd_inspect(&file, &cfg, pgm.as_deref(), scale, grid.as_deref(), quiet),
        Command::GenMap { cfg, out } => cmd_gen_map(&cfg, &out),
        Command::GenCloud {
            cfg,
            map,
            x,
            y,
            theta,
            noise_seed,
            out,
        } => cmd_gen_cloud(&cfg, map.as_deref(), [x, y, theta], noise_seed, &out),
        Command::PlotReturns { metrics, out } => cmd_plot_returns(&metrics, &out),
        Command::Config { cfg, out } => {
            let run_cfg = build_config(&cfg, None)?;
            let text = run_cfg.to_toml().internal()?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display())).internal(),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

/// Layer preset, config file and overrides. `base` replaces the preset
/// defaults when no preset is named (used for checkpoint configs).
fn build_config(args: &ConfigArgs, base: Option<&RunConfig>) -> Result<RunConfig, Failure> {
    let preset = args.preset.as_deref().map(Preset::parse).transpose().usage()?;
    let mut builder = match (preset, base) {
        (None, Some(b)) => ConfigBuilder::from_config(b),
        (p, _) => ConfigBuilder::new(p),
    };
    if let Some(path) = &args.config {
        builder = builder.merge_file(path).usage()?;
    }
    for o in &args.overrides {
        builder = builder.set(o).usage()?;
    }
    if let Some(seed) = args.seed {
        builder = builder.set(&format!("seed={seed}")).usage()?;
    }
    builder.build().usage()
}

fn output_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn create_layout(dir: &Path) -> Result<(), Failure> {
    for sub in ["checkpoints", "trajectories", "plots"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p)
            .with_context(|| format!("creating {}", p.display()))
            .internal()?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .internal()
}

fn cmd_train(args: &ConfigArgs, iterations: Option<usize>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = build_config(args, None)?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let dir = output_dir(out, "train");
    create_layout(&dir)?;
    let toml = cfg.to_toml().internal()?;
    write_file(&dir.join("config.toml"), &toml)?;
    let sim = cfg.sim();
    let mut envs = VecEnv::new(sim.clone(), cfg.ppo.num_envs, derive_seed(cfg.seed, 1)).internal()?;
    let mut trainer = Trainer::new(
        sim.obs_dim(),
        sim.env.omega_max,
        cfg.ppo.clone(),
        cfg.nn.clone(),
        derive_seed(cfg.seed, 0),
    )
    .usage()?;
    eprintln!(
        "training {} iterations: observation {} x {} = {} inputs, batch {}",
        cfg.iterations,
        sim.env.history_len,
        sim.frame_len(),
        sim.obs_dim(),
        cfg.ppo.batch_size
    );
    let output = TrainOutput {
        metrics_csv: Some(dir.join("metrics.csv")),
        checkpoint_dir: Some(dir.join("checkpoints")),
        env_config: Some(toml),
    };
    let history = ppo::train(&mut envs, &mut trainer, cfg.iterations, &output, |_, m| {
        eprintln!(
            "iter {:>4}  steps {:>8}  return {:>8.3}  length {:>6.1}  kl {:.4}  lr {:.2e}",
            m.iteration, m.env_steps, m.mean_return, m.mean_episode_length, m.kl, m.lr
        );
        Ok(Control::Continue)
    })
    .internal()?;
    let curve: Vec<(f64, f64)> = history
        .iter()
        .filter(|m| m.mean_return.is_finite())
        .map(|m| (m.iteration as f64, m.mean_return))
        .collect();
    write_file(
        &dir.join("plots").join("mean_return.svg"),
        bench::line_plot_svg(&[("train", curve)], "Mean episode return", "iteration", "mean return"),
    )?;
    // one sampled episode of the final policy on the training distribution
    let agent = Agent::Policy {
        policy: Arc::new(trainer.policy.clone()),
        deterministic: false,
    };
    let mut rows = Vec::new();
    let trial = bench::run_trial(&Arc::new(sim), &agent, derive_seed(cfg.seed, 2), Some(&mut rows)).internal()?;
    let traj_path = dir.join("trajectories").join("final_policy.csv");
    let file = fs::File::create(&traj_path)
        .with_context(|| format!("writing {}", traj_path.display()))
        .internal()?;
    write_trajectory(&rows, file).internal()?;
    eprintln!(
        "done: {} (final episode: {:.2} m in {:.1} s, {})",
        dir.display(),
        trial.distance,
        trial.time,
        if trial.success { "completed" } else { "failed" }
    );
    Ok(())
}

struct EvalArgs {
    cfg: ConfigArgs,
    checkpoint: Option<PathBuf>,
    agent: Option<String>,
    sweep: String,
    trials: Option<usize>,
    row_length: Option<f64>,
    deterministic: bool,
    out: Option<PathBuf>,
}

fn parse_agent(name: &str) -> anyhow::Result<Agent> {
    match name.split_once(':') {
        None if name == "scripted-zero" => Ok(Agent::ScriptedZero),
        Some(("scripted-constant", w)) => {
            let w: f64 = w.parse().with_context(|| format!("bad yaw rate in {name:?}"))?;
            Ok(Agent::ScriptedConstant(w))
        }
        _ => Err(anyhow!("unknown agent {name:?} (expected scripted-zero or scripted-constant:OMEGA)")),
    }
}

fn parse_pairs(spec: &str, cfg: &RunConfig) -> anyhow::Result<Vec<(f64, f64)>> {
    match spec {
        "standard" => Ok(bench::standard_pairs()),
        "config" => Ok(cfg.bench.pairs.clone()),
        list => list
            .split(',')
            .map(|p| {
                let (f, a) = p
                    .split_once(':')
                    .ok_or_else(|| anyhow!("sweep entry {p:?} is not FREQUENCY:AMPLITUDE"))?;
                Ok((f.trim().parse()?, a.trim().parse()?))
            })
            .collect(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let checkpoint = match &args.checkpoint {
        Some(p) => Some(
            Checkpoint::load(p)
                .with_context(|| format!("loading checkpoint {}", p.display()))
                .usage()?,
        ),
        None => None,
    };
    let base = match checkpoint.as_ref().and_then(|c| c.env_config.as_deref()) {
        Some(text) if args.cfg.config.is_none() => Some(
            RunConfig::from_toml(text)
                .context("checkpoint carries an unreadable config")
                .usage()?,
        ),
        _ => None,
    };
    let mut cfg = build_config(&args.cfg, base.as_ref())?;
    cfg.bench.pairs = parse_pairs(&args.sweep, &cfg).usage()?;
    if let Some(n) = args.trials {
        cfg.bench.trials = n;
    }
    if let Some(l) = args.row_length {
        cfg.bench.row_length = l;
    }
    cfg.bench.deterministic |= args.deterministic;
    cfg.validate().usage()?;
    let agent = match (&checkpoint, &args.agent) {
        (Some(c), _) => Agent::Policy {
            policy: Arc::new(c.policy.clone()),
            deterministic: cfg.bench.deterministic,
        },
        (None, Some(name)) => parse_agent(name).usage()?,
        (None, None) => return Err(anyhow!("either --checkpoint or --agent is required")).usage(),
    };
    let sim = cfg.sim();
    agent.check(&sim).usage()?;
    let dir = output_dir(args.out, "eval");
    create_layout(&dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().internal()?)?;
    let rows = bench::sweep_logged(&sim, &agent, &cfg.bench, true).internal()?;
    write_eval_outputs(&dir, &rows, agent.name())?;
    for row in &rows {
        match (&row.summary, &row.error) {
            (Some(s), _) => eprintln!(
                "f={:<4} a={:<5} distance {:>7.2} +- {:<6.2} time {:>7.2} +- {:<6.2} success {:>3.0}%",
                row.frequency,
                row.amplitude,
                s.avg_distance,
                s.std_distance,
                s.avg_time,
                s.std_time,
                100.0 * s.success_rate
            ),
            (None, Some(e)) => eprintln!("f={} a={} failed: {e}", row.frequency, row.amplitude),
            (None, None) => {}
        }
    }
    eprintln!("results: {}", dir.join("table.csv").display());
    Ok(())
}

fn write_eval_outputs(dir: &Path, rows: &[SweepRow], agent: &str) -> Result<(), Failure> {
    let mut table = Vec::new();
    bench::write_table_csv(rows, &mut table).internal()?;
    write_file(&dir.join("table.csv"), table)?;
    let mut trials = Vec::new();
    bench::write_trials_csv(rows, &mut trials).internal()?;
    write_file(&dir.join("trials.csv"), trials)?;
    write_file(
        &dir.join("plots").join("distance_boxplot.svg"),
        bench::distance_boxplot_svg(rows, &format!("Distance per configuration ({agent})")),
    )?;
    for row in rows {
        for (k, traj) in row.trajectories.iter().enumerate() {
            let name = format!("f{}_a{}_trial{:02}.csv", row.frequency, row.amplitude, k);
            let path = dir.join("trajectories").join(name);
            let file = fs::File::create(&path)
                .with_context(|| format!("writing {}", path.display()))
                .internal()?;
            write_trajectory(traj, file).internal()?;
        }
    }
    Ok(())
}

fn cmd_inspect(
    file: &Path,
    args: &ConfigArgs,
    pgm: Option<&Path>,
    scale: usize,
    grid: Option<&Path>,
    quiet: bool,
) -> Result<(), Failure> {
    let cfg = build_config(args, None)?;
    let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut report = String::new();
    let map: Option<RowMap> = match ext {
        "json" => {
            let m = PlantationMap::load(file).usage()?;
            let spec = m.spec();
            let _ = writeln!(report, "plantation map: {:?} row, {} plants", spec.pattern, m.plants().len());
            let _ = writeln!(
                report,
                "row length {:.3} m, spacing {} m, frequency {}, amplitude {} m, seed {}",
                m.row_length(),
                spec.row_spacing,
                spec.frequency,
                spec.amplitude,
                spec.seed
            );
            None
        }
        "xyz" => {
            let cloud = PointCloud::load_xyz(file).usage()?;
            let map = rowmap::transform(&cloud, &cfg.rowmap);
            let _ = writeln!(report, "point cloud: {} points", cloud.len());
            Some(map)
        }
        _ => {
            let text = fs::read_to_string(file)
                .with_context(|| format!("reading {}", file.display()))
                .usage()?;
            Some(
                RowMap::from_text(&text, cfg.rowmap.height_levels)
                    .with_context(|| format!("parsing row map {}", file.display()))
                    .usage()?,
            )
        }
    };
    if let Some(m) = &map {
        let (nx, ny) = m.dims();
        let occupied = m.values().filter(|&v| v > 0.0).count();
        let _ = writeln!(
            report,
            "row map {nx} x {ny}: {occupied} occupied cells, occupancy fraction {:.4}, mean {:.4}",
            m.occupancy_fraction(),
            m.mean()
        );
        if !quiet {
            report.push_str(&m.to_text());
        }
        if let Some(p) = grid {
            m.save_text(p).internal()?;
        }
        if let Some(p) = pgm {
            m.save_pgm(p, scale.max(1)).internal()?;
        }
    } else if pgm.is_some() || grid.is_some() {
        return Err(anyhow!("--pgm and --grid need a point cloud or row map input")).usage();
    }
    print!("{report}");
    Ok(())
}

fn load_or_generate_map(cfg: &RunConfig, path: Option<&Path>) -> Result<PlantationMap, Failure> {
    match path {
        Some(p) => PlantationMap::load(p).usage(),
        None => world::generate(&cfg.world.with_seed(derive_seed(cfg.seed, 4))).usage(),
    }
}

fn cmd_gen_map(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = build_config(args, None)?;
    let map = load_or_generate_map(&cfg, None)?;
    map.save(out).internal()?;
    eprintln!("{} plants, row length {:.3} m -> {}", map.plants().len(), map.row_length(), out.display());
    Ok(())
}

fn cmd_gen_cloud(
    args: &ConfigArgs,
    map_path: Option<&Path>,
    pose: [Option<f64>; 3],
    noise_seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = build_config(args, None)?;
    let map = Arc::new(load_or_generate_map(&cfg, map_path)?);
    let start = {
        let mut sim = cfg.sim();
        sim.env = sim.env.without_start_jitter();
        let mut env = Env::with_map(Arc::new(sim), EnvSeeds::from_base(cfg.seed), Arc::clone(&map));
        env.reset().internal()?;
        env.state().pose
    };
    let pose = Pose2::new(
        pose[0].unwrap_or(start.x),
        pose[1].unwrap_or(start.y),
        pose[2].unwrap_or(start.theta),
    );
    let cloud = sensor::sweep(&pose, &map, &cfg.sensor, noise_seed);
    cloud.save_xyz(out).internal()?;
    eprintln!("{} of {} rays returned -> {}", cloud.len(), cfg.sensor.ray_count(), out.display());
    Ok(())
}

fn cmd_plot_returns(metrics: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut series = Vec::new();
    for path in metrics {
        let mut reader = csv::Reader::from_path(path)
            .with_context(|| format!("reading {}", path.display()))
            .usage()?;
        let headers = reader.headers().usage()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| anyhow!("{}: missing column {name}", path.display()))
        };
        let (it, ret) = (col("iteration").usage()?, col("mean_return").usage()?);
        let mut points = Vec::new();
        for rec in reader.records() {
            let rec = rec.with_context(|| format!("reading {}", path.display())).usage()?;
            let x: f64 = rec[it].parse().with_context(|| format!("{}: bad iteration", path.display())).usage()?;
            let y: f64 = rec[ret].parse().with_context(|| format!("{}: bad mean_return", path.display())).usage()?;
            if y.is_finite() {
                points.push((x, y));
            }
        }
        let label = path
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        series.push((label, points));
    }
    let refs: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(l, p)| (l.as_str(), p.clone())).collect();
    write_file(out, bench::line_plot_svg(&refs, "Mean episode return", "iteration", "mean return"))
}
