//! Multi-trial evaluation, summary statistics and the frequency/amplitude sweep.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Distribution, Max, Min, OrderStatistics};

use crate::env::{Env, EnvSeeds, SimConfig, TrajectoryRow};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::ppo::GaussianPolicy;
use crate::rng::derive_seed;
use crate::world::RowSpec;

/// A steering controller under evaluation.
#[derive(Debug, Clone)]
pub enum Agent {
    /// Always commands zero yaw rate.
    ScriptedZero,
    /// Always commands the given yaw rate.
    ScriptedConstant(f64),
    Policy {
        policy: Arc<GaussianPolicy>,
        deterministic: bool,
    },
}

impl Agent {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::ScriptedZero => "scripted-zero",
            Agent::ScriptedConstant(_) => "scripted-constant",
            Agent::Policy { .. } => "policy",
        }
    }

    /// Fails when a policy's input size differs from the environment's.
    pub fn check(&self, cfg: &SimConfig) -> Result<()> {
        if let Agent::Policy { policy, .. } = self {
            if policy.obs_dim() != cfg.obs_dim() {
                return Err(Error::Shape {
                    context: "checkpoint observation size vs config",
                    expected: cfg.obs_dim(),
                    actual: policy.obs_dim(),
                });
            }
        }
        Ok(())
    }

    fn act(&self, obs: &[f32], rng: &mut ChaCha8Rng) -> Result<f64> {
        match self {
            Agent::ScriptedZero => Ok(0.0),
            Agent::ScriptedConstant(w) => Ok(*w),
            Agent::Policy {
                policy,
                deterministic,
            } => policy.act(obs, *deterministic, rng),
        }
    }
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Progress along the row when the episode ended, capped at the row length, m.
    pub distance: f64,
    /// Episode duration, s.
    pub time: f64,
    pub success: bool,
    pub collision_pose: Option<Point2>,
    pub steps: usize,
    pub episode_return: f64,
}

/// Run one episode. With `log` set, every step is recorded.
pub fn run_trial(
    cfg: &Arc<SimConfig>,
    agent: &Agent,
    seed: u64,
    log: Option<&mut Vec<TrajectoryRow>>,
) -> Result<TrialResult> {
    agent.check(cfg)?;
    let mut env = Env::new(Arc::clone(cfg), EnvSeeds::from_base(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut obs = env.reset()?;
    let mut log = log;
    let dt = cfg.env.dt;
    if let Some(rows) = log.as_deref_mut() {
        rows.clear();
        rows.push(trajectory_row(&env, 0.0, 0.0, false));
    }
    loop {
        let omega = agent.act(&obs.data, &mut rng)?;
        let step = env.step(omega)?;
        if let Some(rows) = log.as_deref_mut() {
            rows.push(trajectory_row(&env, omega, step.reward, step.info.collided));
        }
        if let Some(ep) = step.info.episode {
            let length = env.map().row_length();
            return Ok(TrialResult {
                distance: ep.progress.min(length),
                time: ep.length as f64 * dt,
                success: ep.progress >= length,
                collision_pose: ep.collided.then(|| env.state().pose.position()),
                steps: ep.length,
                episode_return: ep.episode_return,
            });
        }
        obs = step.observation;
    }
}

fn trajectory_row(env: &Env, omega: f64, reward: f64, collided: bool) -> TrajectoryRow {
    let pose = env.state().pose;
    TrajectoryRow {
        step: env.steps(),
        t: env.steps() as f64 * env.config().env.dt,
        x: pose.x,
        y: pose.y,
        theta: pose.theta,
        omega,
        reward,
        progress: env.progress(),
        collided,
    }
}

/// Independent trials, one per seed, returned in seed order.
pub fn run_trials(cfg: &SimConfig, agent: &Agent, seeds: &[u64]) -> Result<Vec<TrialResult>> {
    Ok(run_trials_logged(cfg, agent, seeds, false)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

/// [`run_trials`] that can also return each trial's trajectory.
pub fn run_trials_logged(
    cfg: &SimConfig,
    agent: &Agent,
    seeds: &[u64],
    keep_trajectories: bool,
) -> Result<Vec<(TrialResult, Vec<TrajectoryRow>)>> {
    cfg.validate()?;
    agent.check(cfg)?;
    let cfg = Arc::new(cfg.clone());
    seeds
        .par_iter()
        .map(|&s| {
            let mut rows = Vec::new();
            let r = run_trial(&cfg, agent, s, keep_trajectories.then_some(&mut rows))?;
            Ok((r, rows))
        })
        .collect()
}

/// Seeds of `n` trials derived from `base`.
pub fn trial_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(base, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub avg_distance: f64,
    pub std_distance: f64,
    pub avg_time: f64,
    pub std_time: f64,
    pub success_rate: f64,
}

/// Means and population standard deviations.
pub fn summarize(results: &[TrialResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("cannot summarise zero trials".into()));
    }
    let stats = |v: Vec<f64>| {
        let d = Data::new(v);
        let mean = d.mean().expect("non-empty");
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d.len() as f64;
        (mean, var.sqrt())
    };
    let (avg_distance, std_distance) = stats(results.iter().map(|r| r.distance).collect());
    let (avg_time, std_time) = stats(results.iter().map(|r| r.time).collect());
    let successes = results.iter().filter(|r| r.success).count();
    Ok(Summary {
        trials: results.len(),
        avg_distance,
        std_distance,
        avg_time,
        std_time,
        success_rate: successes as f64 / results.len() as f64,
    })
}

/// The ten (frequency, amplitude) configurations of the reference evaluation.
pub fn standard_pairs() -> Vec<(f64, f64)> {
    vec![
        (0.0, 0.0),
        (1.8, 0.20),
        (2.0, 0.20),
        (2.2, 0.20),
        (2.4, 0.20),
        (2.6, 0.20),
        (1.8, 0.21),
        (1.8, 0.22),
        (1.8, 0.23),
        (1.8, 0.24),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// `(frequency, amplitude)` pairs; `(0, 0)` is a straight row.
    pub pairs: Vec<(f64, f64)>,
    pub trials: usize,
    pub row_length: f64,
    pub deterministic: bool,
    /// Keep the training-time start pose jitter during evaluation.
    pub start_jitter: bool,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            pairs: standard_pairs(),
            trials: 15,
            row_length: 100.0,
            deterministic: false,
            start_jitter: false,
            seed: 2024,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one (frequency, amplitude) pair".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("sweep needs at least one trial".into()));
        }
        if !(self.row_length > 0.0) {
            return Err(Error::InvalidConfig("sweep row_length must be positive".into()));
        }
        Ok(())
    }

    /// Simulation config of one sweep entry.
    pub fn config_for(&self, base: &SimConfig, frequency: f64, amplitude: f64) -> SimConfig {
        let mut cfg = base.clone();
        let curve = RowSpec::from_curve(frequency, amplitude, self.row_length);
        cfg.world = RowSpec {
            pattern: curve.pattern,
            frequency: curve.frequency,
            amplitude: curve.amplitude,
            row_length: self.row_length,
            ..base.world
        };
        if !self.start_jitter {
            cfg.env = cfg.env.without_start_jitter();
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub frequency: f64,
    pub amplitude: f64,
    pub results: Vec<TrialResult>,
    /// Per-trial trajectories when requested, else empty.
    pub trajectories: Vec<Vec<TrajectoryRow>>,
    pub summary: Option<Summary>,
    /// Set when the entry could not be evaluated.
    pub error: Option<String>,
}

/// Evaluate every configuration; failures are recorded per row.
pub fn sweep(base: &SimConfig, agent: &Agent, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    sweep_logged(base, agent, spec, false)
}

pub fn sweep_logged(base: &SimConfig, agent: &Agent, spec: &SweepSpec, keep_trajectories: bool) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let seeds = trial_seeds(spec.seed, spec.trials);
    Ok(spec
        .pairs
        .iter()
        .map(|&(frequency, amplitude)| {
            let cfg = spec.config_for(base, frequency, amplitude);
            let outcome = run_trials_logged(&cfg, agent, &seeds, keep_trajectories).and_then(|r| {
                let (results, trajectories): (Vec<_>, Vec<_>) = r.into_iter().unzip();
                summarize(&results).map(|s| (results, trajectories, s))
            });
            match outcome {
                Ok((results, trajectories, summary)) => SweepRow {
                    frequency,
                    amplitude,
                    results,
                    trajectories: if keep_trajectories { trajectories } else { Vec::new() },
                    summary: Some(summary),
                    error: None,
                },
                Err(e) => SweepRow {
                    frequency,
                    amplitude,
                    results: Vec::new(),
                    trajectories: Vec::new(),
                    summary: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

pub const TABLE_HEADER: [&str; 9] = [
    "frequency_hz",
    "amplitude_m",
    "avg_distance_m",
    "std_distance_m",
    "avg_time_s",
    "std_time_s",
    "success_rate",
    "trials",
    "error",
];

/// One row per configuration with distance/time statistics.
pub fn write_table_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    for row in rows {
        let mut rec = vec![row.frequency.to_string(), row.amplitude.to_string()];
        match &row.summary {
            Some(s) => rec.extend([
                s.avg_distance.to_string(),
                s.std_distance.to_string(),
                s.avg_time.to_string(),
                s.std_time.to_string(),
                s.success_rate.to_string(),
                s.trials.to_string(),
                String::new(),
            ]),
            None => {
                rec.extend(std::iter::repeat_n(String::new(), 6));
                rec.push(row.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-trial distances and times, the data behind the box plots.
pub fn write_trials_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frequency_hz", "amplitude_m", "trial", "distance_m", "time_s", "success"])?;
    for row in rows {
        for (i, r) in row.results.iter().enumerate() {
            w.write_record([
                row.frequency.to_string(),
                row.amplitude.to_string(),
                i.to_string(),
                r.distance.to_string(),
                r.time.to_string(),
                r.success.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Five-number summary `(min, q1, median, q3, max)`.
pub fn five_numbers(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut d = Data::new(values.to_vec());
    Some([d.min(), d.lower_quartile(), d.median(), d.upper_quartile(), d.max()])
}

/// Box plot of trial distances per configuration as a standalone SVG.
pub fn distance_boxplot_svg(rows: &[SweepRow], title: &str) -> String {
    const W: f64 = 80.0;
    const H: f64 = 300.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    let width = LEFT + W * rows.len().max(1) as f64 + 20.0;
    let height = TOP + H + 60.0;
    let y_max = rows
        .iter()
        .flat_map(|r| r.results.iter().map(|t| t.distance))
        .fold(1.0f64, f64::max);
    let y = |v: f64| TOP + H * (1.0 - v / y_max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + H);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
            LEFT - 5.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">distance (m)</text>"#,
        TOP + H / 2.0,
        TOP + H / 2.0
    );
    for (i, row) in rows.iter().enumerate() {
        let cx = LEFT + W * (i as f64 + 0.5);
        let dists: Vec<f64> = row.results.iter().map(|t| t.distance).collect();
        if let Some([lo, q1, med, q3, hi]) = five_numbers(&dists) {
            let (x0, x1) = (cx - W * 0.3, cx + W * 0.3);
            let _ = writeln!(s, r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#, y(hi), y(q3));
            let _ = writeln!(s, r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#, y(q1), y(lo));
            let _ = writeln!(
                s,
                r##"<rect x="{x0}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
                y(q3),
                x1 - x0,
                (y(q1) - y(q3)).max(0.5)
            );
            let _ = writeln!(s, r#"<line x1="{x0}" y1="{:.1}" x2="{x1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#, y(med), y(med));
            for v in [lo, hi] {
                let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, cx - 8.0, y(v), cx + 8.0, y(v));
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{:.1}" text-anchor="middle">{} Hz</text><text x="{cx}" y="{:.1}" text-anchor="middle">{} m</text>"#,
            TOP + H + 18.0,
            row.frequency,
            TOP + H + 32.0,
            row.amplitude
        );
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart of one or more labelled `(x, y)` series as a standalone SVG.
pub fn line_plot_svg(series: &[(&str, Vec<(f64, f64)>)], title: &str, x_label: &str, y_label: &str) -> String {
    const W: f64 = 560.0;
    const H: f64 = 320.0;
    const LEFT: f64 = 70.0;
    const TOP: f64 = 40.0;
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| LEFT + W * (x - x0) / (x1 - x0);
    let py = |y: f64| TOP + H * (1.0 - (y - y0) / (y1 - y0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        LEFT + W + 140.0,
        TOP + H + 50.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, LEFT + W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{W}" height="{H}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(xv), TOP + H + 15.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 5.0, py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + W / 2.0, TOP + H + 35.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{0}" transform="rotate(-90 15 {0})" text-anchor="middle">{1}</text>"#,
        TOP + H / 2.0,
        escape(y_label)
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            LEFT + W + 10.0,
            LEFT + W + 30.0,
            LEFT + W + 35.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
