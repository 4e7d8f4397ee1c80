//! The row-following decision process.
//!
//! A unicycle robot drives at constant forward speed; the only control is
//! the yaw rate. Each control step sweeps the LiDAR once, downsamples the
//! cloud into a row map and pushes it onto a fixed-length history. The
//! reward pays for distance travelled, scaled down by abrupt changes of the
//! yaw-rate command, minus a sparse collision penalty.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};
use crate::rng::derive_seed;
use crate::rowmap::{self, RowMap, VoxelGridSpec};
use crate::sensor::{self, LidarConfig, PointCloud, SweepWindow, NOISE_TRUNCATION};
use crate::world::{self, Footprint, PlantationMap, RowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2,
    /// Commanded forward speed, m/s.
    pub speed: f64,
    /// Yaw rate applied on the previous step, rad/s.
    pub last_omega: f64,
}

impl RobotState {
    pub fn new(pose: Pose2, speed: f64) -> Self {
        Self {
            pose,
            speed,
            last_omega: 0.0,
        }
    }
}

/// Euler update of the unicycle model.
pub fn step_dynamics(state: &RobotState, omega: f64, dt: f64) -> Result<RobotState> {
    if !omega.is_finite() {
        return Err(Error::NonFinite(format!("yaw rate command {omega}")));
    }
    let Pose2 { x, y, theta } = state.pose;
    let v = state.speed;
    Ok(RobotState {
        pose: Pose2::new(
            x + v * theta.cos() * dt,
            y + v * theta.sin() * dt,
            wrap_angle(theta + omega * dt),
        ),
        speed: v,
        last_omega: omega,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_task: f64,
    /// Exponent applied to the action-rate penalty factor.
    pub w_penalty: f64,
    pub w_collision: f64,
    /// Normaliser of the squared yaw-rate change, rad^2/s^2.
    pub sigma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_task: 5.0,
            w_penalty: 1.0,
            w_collision: 1.0,
            sigma: 2.25,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_task, self.w_penalty, self.w_collision];
        if weights.iter().any(|w| !(*w >= 0.0)) || !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(
                "reward weights must be >= 0 and sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step reward: distance term times the action-rate penalty, minus the
/// collision penalty.
pub fn reward(
    prev: &RobotState,
    next: &RobotState,
    omega: f64,
    collided: bool,
    cfg: &RewardConfig,
    dt: f64,
) -> f64 {
    let task = cfg.w_task * next.speed * dt;
    let change = omega - prev.last_omega;
    let penalty = (1.0 - change * change / cfg.sigma).clamp(0.0, 1.0);
    let penalty = if cfg.w_penalty == 1.0 {
        penalty
    } else {
        penalty.powf(cfg.w_penalty)
    };
    task * penalty - if collided { cfg.w_collision } else { 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMode {
    /// Downsampled row maps.
    RowMap,
    /// The raw sweep, one `(x, y, z) / max_range` slot per ray, zeros for misses.
    RawCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Constant forward speed, m/s.
    pub speed: f64,
    /// Control period, s.
    pub dt: f64,
    /// Yaw-rate actuator limit, rad/s.
    pub omega_max: f64,
    /// Number of stacked observations.
    pub history_len: usize,
    /// Episode time limit as a multiple of the nominal traversal time.
    pub time_limit_factor: f64,
    /// Half-width of the uniform lateral start offset, m.
    pub start_lateral_jitter: f64,
    /// Half-width of the uniform start heading offset, degrees.
    pub start_heading_jitter_deg: f64,
    /// Draw a fresh plantation layout for every episode.
    pub randomize_map: bool,
    pub observation: ObservationMode,
    pub footprint: Footprint,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            speed: 0.5635,
            dt: 0.1,
            omega_max: 1.5,
            history_len: 3,
            time_limit_factor: 2.0,
            start_lateral_jitter: 0.1,
            start_heading_jitter_deg: 5.0,
            randomize_map: true,
            observation: ObservationMode::RowMap,
            footprint: Footprint::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.speed, "speed"),
            (self.dt, "dt"),
            (self.omega_max, "omega_max"),
            (self.time_limit_factor, "time_limit_factor"),
            (self.footprint.length, "footprint.length"),
            (self.footprint.width, "footprint.width"),
        ];
        if let Some((_, name)) = positive.iter().find(|(v, _)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("env.{name} must be > 0")));
        }
        if self.history_len == 0 {
            return Err(Error::InvalidConfig("env.history_len must be >= 1".into()));
        }
        if !(self.start_lateral_jitter >= 0.0 && self.start_heading_jitter_deg >= 0.0) {
            return Err(Error::InvalidConfig("start jitter must be >= 0".into()));
        }
        self.reward.validate()
    }

    /// Episode time limit for a row of `row_length` meters, seconds.
    pub fn time_limit(&self, row_length: f64) -> f64 {
        self.time_limit_factor * row_length / self.speed
    }

    pub fn without_start_jitter(self) -> Self {
        Self {
            start_lateral_jitter: 0.0,
            start_heading_jitter_deg: 0.0,
            ..self
        }
    }
}

/// Everything needed to build an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub world: RowSpec,
    pub sensor: LidarConfig,
    pub rowmap: VoxelGridSpec,
    pub env: EnvConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sensor.validate()?;
        self.rowmap.validate()?;
        self.env.validate()
    }

    /// Length of one observation frame.
    pub fn frame_len(&self) -> usize {
        match self.env.observation {
            ObservationMode::RowMap => self.rowmap.cell_count(),
            ObservationMode::RawCloud => 3 * self.sensor.ray_count(),
        }
    }

    /// Length of a stacked observation.
    pub fn obs_dim(&self) -> usize {
        self.env.history_len * self.frame_len()
    }

    /// The sweep subset that can land in the row-map ROI. Rays outside it
    /// cannot contribute, so the row map is unchanged.
    fn sweep_window(&self) -> Option<SweepWindow> {
        if self.env.observation != ObservationMode::RowMap {
            return None;
        }
        let margin = NOISE_TRUNCATION * self.sensor.noise_sigma + 2.0 * self.rowmap.delta[0].max(self.rowmap.delta[1]);
        Some(SweepWindow {
            forward_only: self.rowmap.roi_x[0] >= 0.0,
            horizontal_reach: self.rowmap.horizontal_reach() + margin,
        })
    }
}

/// Seeds of an environment's three random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSeeds {
    pub map: u64,
    pub reset: u64,
    pub noise: u64,
}

impl EnvSeeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            map: derive_seed(base, 0),
            reset: derive_seed(base, 1),
            noise: derive_seed(base, 2),
        }
    }
}

/// Stacked observation history, oldest frame first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub data: Vec<f32>,
    pub frame_len: usize,
}

impl Observation {
    pub fn history_len(&self) -> usize {
        self.data.len() / self.frame_len
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.frame_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
    pub progress: f64,
    pub collided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepInfo {
    pub progress_m: f64,
    pub collided: bool,
    pub elapsed_s: f64,
    /// Set on the terminal step.
    pub episode: Option<EpisodeStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

const MAX_START_DRAWS: usize = 64;

/// One row-following environment. Single owner; not shared between threads.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: Arc<SimConfig>,
    seeds: EnvSeeds,
    map: Arc<PlantationMap>,
    state: RobotState,
    history: VecDeque<Vec<f32>>,
    last_map: Option<RowMap>,
    reset_rng: ChaCha8Rng,
    episode: u64,
    sweeps: u64,
    steps: usize,
    episode_return: f64,
    progress: f64,
    terminated: bool,
}

impl Env {
    pub fn new(cfg: Arc<SimConfig>, seeds: EnvSeeds) -> Result<Self> {
        cfg.validate()?;
        let map = Arc::new(world::generate(&cfg.world.with_seed(seeds.map))?);
        Ok(Self::with_map(cfg, seeds, map))
    }

    /// Environment over a fixed, shared map (`randomize_map` is ignored).
    pub fn with_map(cfg: Arc<SimConfig>, seeds: EnvSeeds, map: Arc<PlantationMap>) -> Self {
        Self {
            reset_rng: ChaCha8Rng::seed_from_u64(seeds.reset),
            state: RobotState::new(Pose2::default(), cfg.env.speed),
            history: VecDeque::with_capacity(cfg.env.history_len),
            cfg,
            seeds,
            map,
            last_map: None,
            episode: 0,
            sweeps: 0,
            steps: 0,
            episode_return: 0.0,
            progress: 0.0,
            terminated: true,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn map(&self) -> &PlantationMap {
        &self.map
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Most recent row map (row-map observation mode only).
    pub fn last_row_map(&self) -> Option<&RowMap> {
        self.last_map.as_ref()
    }

    /// Start a new episode at the row start with seeded pose jitter.
    pub fn reset(&mut self) -> Result<Observation> {
        let cfg = Arc::clone(&self.cfg);
        let env = &cfg.env;
        if env.randomize_map && self.episode > 0 {
            let seed = derive_seed(self.seeds.map, self.episode);
            self.map = Arc::new(world::generate(&self.cfg.world.with_seed(seed))?);
        }
        self.episode += 1;
        let (c, n) = self.map.centerline().frame_at(0.0);
        let tangent = (-n.x).atan2(n.y) + 0.0;
        let start = |lateral: f64, heading: f64| {
            Pose2::new(
                c.x + lateral * n.x,
                c.y + lateral * n.y,
                wrap_angle(tangent + heading),
            )
        };
        // Jittered starts that touch a plant are redrawn; the centred start
        // is the fallback.
        let mut pose = start(0.0, 0.0);
        for _ in 0..MAX_START_DRAWS {
            let lateral = if env.start_lateral_jitter > 0.0 {
                self.reset_rng
                    .random_range(-env.start_lateral_jitter..=env.start_lateral_jitter)
            } else {
                0.0
            };
            let heading = if env.start_heading_jitter_deg > 0.0 {
                let h = env.start_heading_jitter_deg.to_radians();
                self.reset_rng.random_range(-h..=h)
            } else {
                0.0
            };
            let candidate = start(lateral, heading);
            if !self.map.collides(&candidate, &env.footprint) {
                pose = candidate;
                break;
            }
        }
        self.state = RobotState::new(pose, env.speed);
        self.steps = 0;
        self.episode_return = 0.0;
        self.progress = self.map.progress(pose.position());
        self.terminated = false;
        let frame = self.observe();
        self.history.clear();
        for _ in 0..env.history_len {
            self.history.push_back(frame.clone());
        }
        Ok(self.observation())
    }

    pub fn observation(&self) -> Observation {
        let frame_len = self.cfg.frame_len();
        let mut data = Vec::with_capacity(frame_len * self.history.len());
        for f in &self.history {
            data.extend_from_slice(f);
        }
        Observation { data, frame_len }
    }

    /// Append the current stacked observation to `out`.
    pub fn extend_observation(&self, out: &mut Vec<f32>) {
        for f in &self.history {
            out.extend_from_slice(f);
        }
    }

    fn sweep_seed(&mut self) -> u64 {
        let s = derive_seed(self.seeds.noise, self.sweeps);
        self.sweeps += 1;
        s
    }

    fn observe(&mut self) -> Vec<f32> {
        let seed = self.sweep_seed();
        let cfg = Arc::clone(&self.cfg);
        let window = cfg.sweep_window();
        let cloud = sensor::sweep_windowed(&self.state.pose, &self.map, &cfg.sensor, seed, window);
        match cfg.env.observation {
            ObservationMode::RowMap => {
                let map = rowmap::transform(&cloud, &cfg.rowmap);
                let mut frame = Vec::with_capacity(map.len());
                map.extend_f32(&mut frame);
                self.last_map = Some(map);
                frame
            }
            ObservationMode::RawCloud => raw_cloud_frame(&cloud, &cfg.sensor),
        }
    }

    /// Advance one control period with yaw-rate command `omega`.
    pub fn step(&mut self, omega: f64) -> Result<StepResult> {
        if self.terminated {
            return Err(Error::Terminated(0));
        }
        let env = self.cfg.env.clone();
        if !omega.is_finite() {
            return Err(Error::NonFinite(format!("yaw rate command {omega}")));
        }
        let omega = omega.clamp(-env.omega_max, env.omega_max);
        let prev = self.state;
        let next = step_dynamics(&prev, omega, env.dt)?;
        self.state = next;
        self.steps += 1;
        let elapsed = self.steps as f64 * env.dt;
        let collided = self.map.collides(&next.pose, &env.footprint);
        self.progress = self.map.progress(next.pose.position());
        let frame = self.observe();
        self.history.pop_front();
        self.history.push_back(frame);
        let r = reward(&prev, &next, omega, collided, &env.reward, env.dt);
        self.episode_return += r;
        let row_length = self.map.row_length();
        let finished = self.progress >= row_length;
        let timed_out = elapsed >= env.time_limit(row_length) - 1e-9;
        self.terminated = collided || finished || timed_out;
        let episode = self.terminated.then(|| EpisodeStats {
            episode_return: self.episode_return,
            length: self.steps,
            progress: self.progress,
            collided,
        });
        Ok(StepResult {
            observation: self.observation(),
            reward: r,
            terminated: self.terminated,
            info: StepInfo {
                progress_m: self.progress,
                collided,
                elapsed_s: elapsed,
                episode,
            },
        })
    }

    /// Full sweep from the current pose, for inspection.
    pub fn sweep_now(&self, noise_seed: u64) -> PointCloud {
        sensor::sweep(&self.state.pose, &self.map, &self.cfg.sensor, noise_seed)
    }
}

/// Fixed-slot raw sweep encoding: ray `k` occupies `[3k, 3k + 3)`.
pub fn raw_cloud_frame(cloud: &PointCloud, cfg: &LidarConfig) -> Vec<f32> {
    let mut frame = vec![0.0f32; 3 * cfg.ray_count()];
    let scale = 1.0 / cfg.max_range;
    for (p, &k) in cloud.points.iter().zip(&cloud.rays) {
        let k = k as usize;
        for a in 0..3 {
            frame[3 * k + a] = (p[a] * scale) as f32;
        }
    }
    frame
}

/// Outcome of one environment step, as seen by a learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
    pub episode: Option<EpisodeStats>,
}

/// A batch of auto-resetting environments with a flat observation layout.
pub trait VectorEnv {
    fn num_envs(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Symmetric action bound; actions are squashed into `[-limit, limit]`.
    fn action_limit(&self) -> f64;
    /// Current observations, `num_envs * obs_dim`, env-major.
    fn observations(&self, out: &mut Vec<f32>);
    fn step(&mut self, actions: &[f64]) -> Result<Vec<Transition>>;
}

/// Vectorised environments. Terminated environments reset immediately; the
/// step result still reports the terminal transition.
pub struct VecEnv {
    envs: Vec<Env>,
}

impl VecEnv {
    /// `n` environments; environment `i` uses seeds derived from `(base_seed, i)`.
    pub fn new(cfg: SimConfig, n: usize, base_seed: u64) -> Result<Self> {
        let cfg = Arc::new(cfg);
        let envs = (0..n)
            .map(|i| Env::new(Arc::clone(&cfg), EnvSeeds::from_base(derive_seed(base_seed, i as u64))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_envs(envs)
    }

    /// Wrap existing environments, resetting any that are not running.
    pub fn from_envs(mut envs: Vec<Env>) -> Result<Self> {
        for env in &mut envs {
            if env.is_terminated() {
                env.reset()?;
            }
        }
        Ok(Self { envs })
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn step_batch(&mut self, actions: &[f64]) -> Result<Vec<StepResult>> {
        if actions.len() != self.envs.len() {
            return Err(Error::Shape {
                context: "step_batch actions",
                expected: self.envs.len(),
                actual: actions.len(),
            });
        }
        self.envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .enumerate()
            .map(|(i, (env, &a))| {
                let result = env.step(a).map_err(|e| match e {
                    Error::Terminated(_) => Error::Terminated(i),
                    other => other,
                })?;
                if result.terminated {
                    env.reset()?;
                }
                Ok(result)
            })
            .collect()
    }
}

impl VectorEnv for VecEnv {
    fn num_envs(&self) -> usize {
        self.envs.len()
    }

    fn obs_dim(&self) -> usize {
        self.envs.first().map_or(0, |e| e.config().obs_dim())
    }

    fn action_limit(&self) -> f64 {
        self.envs.first().map_or(1.0, |e| e.config().env.omega_max)
    }

    fn observations(&self, out: &mut Vec<f32>) {
        out.clear();
        for env in &self.envs {
            env.extend_observation(out);
        }
    }

    fn step(&mut self, actions: &[f64]) -> Result<Vec<Transition>> {
        Ok(self
            .step_batch(actions)?
            .into_iter()
            .map(|r| Transition {
                reward: r.reward,
                done: r.terminated,
                episode: r.info.episode,
            })
            .collect())
    }
}

/// One row of a trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub omega: f64,
    pub reward: f64,
    pub progress: f64,
    pub collided: bool,
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Plant;
    use std::f64::consts::PI;

    const V: f64 = 0.5635;

    fn state(theta: f64, last_omega: f64) -> RobotState {
        RobotState {
            pose: Pose2::new(0.0, 0.0, theta),
            speed: V,
            last_omega,
        }
    }

    fn straight_cfg(length: f64) -> SimConfig {
        SimConfig {
            world: RowSpec::straight(length),
            env: EnvConfig::default().without_start_jitter(),
            ..SimConfig::default()
        }
    }

    #[test]
    fn dynamics_examples() {
        let s = step_dynamics(&state(0.0, 0.0), 0.0, 0.1).unwrap();
        assert!((s.pose.x - 0.05635).abs() < 1e-15);
        assert_eq!((s.pose.y, s.pose.theta), (0.0, 0.0));
        let s = step_dynamics(&state(0.0, 0.0), 1.0, 0.1).unwrap();
        assert_eq!(s.pose.theta, 0.1);
        assert_eq!(s.last_omega, 1.0);
        assert!(step_dynamics(&state(0.0, 0.0), f64::NAN, 0.1).is_err());
    }

    #[test]
    fn full_circle_returns_heading() {
        let omega = 0.8;
        let dt = 1e-4;
        let steps = (2.0 * PI / omega / dt).round() as usize;
        let mut s = state(0.3, 0.0);
        for _ in 0..steps {
            s = step_dynamics(&s, omega, dt).unwrap();
        }
        let residual = wrap_angle(s.pose.theta - 0.3 - (steps as f64 * dt * omega - 2.0 * PI));
        assert!(residual.abs() < 1e-6, "{residual}");
        // and the Euler circle closes up to first-order error
        assert!(s.pose.x.hypot(s.pose.y) < 1e-3);
    }

    #[test]
    fn constant_speed_step_length() {
        let mut s = state(0.4, 0.0);
        for k in 0..100 {
            let next = step_dynamics(&s, (k as f64 * 0.37).sin(), 0.1).unwrap();
            let d = next.pose.position().distance(&s.pose.position());
            assert!((d - V * 0.1).abs() < 1e-12);
            s = next;
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let prev = state(0.0, 0.3);
        let r = reward(&prev, &prev, 0.3, false, &cfg, 0.1);
        assert!((r - 0.28175).abs() < 1e-12);
        let r = reward(&prev, &prev, 0.3 + 1.5, true, &cfg, 0.1);
        assert_eq!(r, -1.0);
        let half = (cfg.sigma / 2.0).sqrt();
        let r = reward(&state(0.0, 0.0), &prev, half, false, &cfg, 0.1);
        assert!((r - 0.140875).abs() < 1e-12);
    }

    #[test]
    fn reset_without_jitter_starts_on_centerline() {
        let mut env = Env::new(Arc::new(straight_cfg(10.0)), EnvSeeds::from_base(1)).unwrap();
        let obs = env.reset().unwrap();
        assert_eq!(env.state().pose, Pose2::new(0.0, 0.0, 0.0));
        assert_eq!(obs.history_len(), 3);
        let frames: Vec<_> = obs.frames().collect();
        assert!(frames.iter().all(|f| *f == frames[0]));
        assert!(frames[0].iter().any(|&v| v > 0.0));
    }

    #[test]
    fn reset_is_deterministic_and_collision_free() {
        let cfg = Arc::new(SimConfig {
            world: RowSpec::sinusoidal(1.8, 0.2, 10.0),
            ..SimConfig::default()
        });
        let mut a = Env::new(Arc::clone(&cfg), EnvSeeds::from_base(5)).unwrap();
        let mut b = Env::new(Arc::clone(&cfg), EnvSeeds::from_base(5)).unwrap();
        assert_eq!(a.reset().unwrap(), b.reset().unwrap());
        for _ in 0..100 {
            a.reset().unwrap();
            assert!(!a.map().collides(&a.state().pose, &cfg.env.footprint));
            assert!(a.state().pose.y.abs() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn straight_row_completes_in_closed_form_steps() {
        let mut env = Env::new(Arc::new(straight_cfg(10.0)), EnvSeeds::from_base(2)).unwrap();
        env.reset().unwrap();
        let mut steps = 0;
        loop {
            let r = env.step(0.0).unwrap();
            steps += 1;
            assert!(!r.info.collided);
            if r.terminated {
                assert!(r.info.progress_m >= 10.0);
                break;
            }
        }
        assert_eq!(steps, ((10.0 / V) / 0.1f64).ceil() as usize);
        assert_eq!(steps, 178);
        assert!(matches!(env.step(0.0), Err(Error::Terminated(_))));
    }

    #[test]
    fn observation_stack_shifts() {
        let mut env = Env::new(Arc::new(straight_cfg(10.0)), EnvSeeds::from_base(3)).unwrap();
        let m0 = env.reset().unwrap().frames().last().unwrap().to_vec();
        let m1 = env.step(0.2).unwrap().observation.frames().last().unwrap().to_vec();
        let obs = env.step(-0.2).unwrap().observation;
        let frames: Vec<_> = obs.frames().collect();
        assert_eq!(frames[0], m0.as_slice());
        assert_eq!(frames[1], m1.as_slice());
        assert_eq!(frames.len(), 3);
    }

    #[test]
    fn driving_into_a_plant_terminates_with_penalty() {
        let mut env = Env::new(Arc::new(straight_cfg(10.0)), EnvSeeds::from_base(4)).unwrap();
        env.reset().unwrap();
        let mut last = None;
        for _ in 0..200 {
            let r = env.step(1.5).unwrap();
            if r.terminated {
                last = Some(r);
                break;
            }
        }
        let r = last.expect("spinning robot must hit the row");
        assert!(r.info.collided);
        assert!(r.reward <= -1.0 + 5.0 * V * 0.1);
        assert!(r.reward < 0.0);
    }

    #[test]
    fn windowed_sweep_keeps_row_map() {
        let cfg = SimConfig {
            world: RowSpec::sinusoidal(2.2, 0.2, 12.0),
            ..SimConfig::default()
        };
        let map = world::generate(&cfg.world.with_seed(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..30 {
            let pose = Pose2::new(
                rng.random_range(-1.0..12.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-PI..PI),
            );
            let full = sensor::sweep(&pose, &map, &cfg.sensor, i);
            let win = sensor::sweep_windowed(&pose, &map, &cfg.sensor, i, cfg.sweep_window());
            assert!(win.len() <= full.len());
            assert_eq!(
                rowmap::transform(&full, &cfg.rowmap),
                rowmap::transform(&win, &cfg.rowmap)
            );
        }
    }

    #[test]
    fn raw_cloud_mode_dimensions() {
        let cfg = SimConfig {
            world: RowSpec::straight(10.0),
            env: EnvConfig {
                observation: ObservationMode::RawCloud,
                history_len: 1,
                ..EnvConfig::default()
            },
            ..SimConfig::default()
        };
        assert_eq!(cfg.obs_dim(), 21600);
        let mut env = Env::new(Arc::new(cfg), EnvSeeds::from_base(1)).unwrap();
        let obs = env.reset().unwrap();
        assert_eq!(obs.data.len(), 21600);
        assert!(obs.data.iter().all(|v| v.abs() <= 1.0));
        assert!(obs.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_matches_sequential_envs() {
        let cfg = SimConfig {
            world: RowSpec::sinusoidal(1.8, 0.2, 5.0),
            ..SimConfig::default()
        };
        let n = 8;
        let mut batch = VecEnv::new(cfg.clone(), n, 21).unwrap();
        let shared = Arc::new(cfg);
        let mut seq: Vec<Env> = (0..n)
            .map(|i| {
                let mut e = Env::new(
                    Arc::clone(&shared),
                    EnvSeeds::from_base(derive_seed(21, i as u64)),
                )
                .unwrap();
                e.reset().unwrap();
                e
            })
            .collect();
        for k in 0..120 {
            let actions: Vec<f64> = (0..n).map(|i| ((k * 7 + i * 3) as f64 * 0.11).sin() * 1.2).collect();
            let results = batch.step_batch(&actions).unwrap();
            for (i, env) in seq.iter_mut().enumerate() {
                let r = env.step(actions[i]).unwrap();
                assert_eq!(r, results[i]);
                if r.terminated {
                    env.reset().unwrap();
                }
                assert_eq!(env.state(), batch.envs()[i].state());
            }
        }
        assert!(batch.step_batch(&[0.0; 3]).is_err());
    }

    #[test]
    fn batch_of_one_equals_single_env() {
        let cfg = straight_cfg(6.0);
        let mut batch = VecEnv::new(cfg.clone(), 1, 9).unwrap();
        let mut env = Env::new(Arc::new(cfg), EnvSeeds::from_base(derive_seed(9, 0))).unwrap();
        env.reset().unwrap();
        for k in 0..300 {
            let a = (k as f64 * 0.3).cos();
            let r = env.step(a).unwrap();
            assert_eq!(batch.step_batch(&[a]).unwrap()[0], r);
            if r.terminated {
                env.reset().unwrap();
            }
        }
    }

    #[test]
    fn rollout_batch_size() {
        let mut vec_env = VecEnv::new(straight_cfg(10.0), 128, 0).unwrap();
        let mut transitions = 0;
        for _ in 0..32 {
            transitions += VectorEnv::step(&mut vec_env, &vec![0.0; 128]).unwrap().len();
        }
        assert_eq!(transitions, 4096);
    }

    #[test]
    fn trajectory_csv_header() {
        let row = TrajectoryRow {
            step: 1,
            t: 0.1,
            x: 0.05635,
            y: 0.0,
            theta: 0.0,
            omega: 0.0,
            reward: 0.28175,
            progress: 0.05635,
            collided: false,
        };
        let mut buf = Vec::new();
        write_trajectory(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,t,x,y,theta,omega,reward,progress,collided\n"));
    }

    #[test]
    fn map_is_shareable() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<PlantationMap>();
        assert_send_sync::<Env>();
        let _ = Plant {
            center: Default::default(),
            radius: 0.1,
            height: 1.0,
        };
    }
}
