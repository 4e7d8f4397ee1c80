//! Proximal policy optimisation with GAE, a tanh-squashed Gaussian policy
//! and a KL-adaptive learning rate.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Transition, VectorEnv};
use crate::error::{Error, Result};
use crate::nn::{grad_norm, Activation, Adam, Init, Mlp};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub hidden_gain: f64,
    pub actor_output_gain: f64,
    pub critic_output_gain: f64,
    /// Initial standard deviation of the pre-squash action.
    pub init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![512, 256, 128],
            critic_hidden: vec![512, 256, 128],
            activation: Activation::Elu,
            hidden_gain: std::f64::consts::SQRT_2,
            actor_output_gain: 0.01,
            critic_output_gain: 1.0,
            init_std: 0.3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub gamma: f64,
    pub lambda: f64,
    pub desired_kl: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Transitions collected per iteration.
    pub batch_size: usize,
    pub num_envs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
    /// Gradient norm treated as divergence.
    pub abort_grad_norm: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            learning_rate: 1e-3,
            schedule: LrSchedule::Adaptive,
            gamma: 0.99,
            lambda: 0.95,
            desired_kl: 0.01,
            entropy_coef: 0.005,
            value_coef: 1.0,
            batch_size: 4096,
            num_envs: 128,
            epochs: 5,
            minibatches: 4,
            max_grad_norm: 1.0,
            abort_grad_norm: 1e6,
            lr_min: 1e-5,
            lr_max: 1e-2,
            checkpoint_interval: 50,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("gamma and lambda must lie in [0, 1], got {} and {}", self.gamma, self.lambda));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr_max {
            return bad("learning rates must be positive with lr_min <= lr_max".into());
        }
        if self.num_envs == 0 || self.batch_size == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("num_envs, batch_size, epochs and minibatches must be positive".into());
        }
        if self.batch_size % self.num_envs != 0 {
            return bad(format!(
                "batch_size {} is not a multiple of num_envs {}",
                self.batch_size, self.num_envs
            ));
        }
        if self.batch_size % self.minibatches != 0 {
            return bad(format!(
                "batch_size {} is not divisible into {} minibatches",
                self.batch_size, self.minibatches
            ));
        }
        if !(self.max_grad_norm > 0.0) || !(self.desired_kl > 0.0) {
            return bad("max_grad_norm and desired_kl must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_env(&self) -> usize {
        self.batch_size / self.num_envs
    }
}

/// Generalised advantage estimation over one environment's sequence.
/// `dones[k]` marks that the episode ended after step `k`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for k in (0..n).rev() {
        let next_value = if k + 1 == n { bootstrap_value } else { values[k + 1] };
        let live = if dones[k] { 0.0 } else { 1.0 };
        let delta = rewards[k] + gamma * next_value * live - values[k];
        last = delta + gamma * lambda * live * last;
        adv[k] = last;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Learning-rate adaptation towards a target KL.
pub fn adapt_lr(current_lr: f64, approx_kl: f64, desired_kl: f64) -> f64 {
    adapt_lr_bounded(current_lr, approx_kl, desired_kl, 1e-5, 1e-2)
}

fn adapt_lr_bounded(lr: f64, kl: f64, desired: f64, lo: f64, hi: f64) -> f64 {
    let lr = if kl > 2.0 * desired {
        lr / 1.5
    } else if kl > 0.0 && kl < desired / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    lr.clamp(lo, hi)
}

/// Log-density of `u` under `N(mean, exp(log_std)^2)`.
pub fn gaussian_log_prob(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * LN_2PI
}

pub fn gaussian_entropy(log_std: f64) -> f64 {
    0.5 + 0.5 * LN_2PI + log_std
}

/// `KL(old || new)` between two univariate Gaussians.
pub fn gaussian_kl(mean_old: f64, log_std_old: f64, mean_new: f64, log_std_new: f64) -> f64 {
    let var_old = (2.0 * log_std_old).exp();
    let var_new = (2.0 * log_std_new).exp();
    let d = mean_old - mean_new;
    log_std_new - log_std_old + (var_old + d * d) / (2.0 * var_new) - 0.5
}

/// In-place normalisation to zero mean and unit (population) deviation.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    values.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Per-sample quantities entering the PPO loss.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub log_prob: &'a [f64],
    pub old_log_prob: &'a [f64],
    pub advantages: &'a [f64],
    pub values: &'a [f64],
    pub returns: &'a [f64],
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Derivative of `loss` with respect to each sample's log-probability.
    pub d_log_prob: Vec<f64>,
    /// Derivative of `loss` with respect to each sample's value estimate.
    pub d_value: Vec<f64>,
}

/// Clipped surrogate, value and entropy terms with their derivatives.
pub fn surrogate_loss(batch: &LossInputs<'_>, cfg: &PpoConfig) -> Result<LossOutput> {
    let n = batch.log_prob.len();
    for (name, len) in [
        ("loss old_log_prob", batch.old_log_prob.len()),
        ("loss advantages", batch.advantages.len()),
        ("loss values", batch.values.len()),
        ("loss returns", batch.returns.len()),
    ] {
        if len != n {
            return Err(Error::Shape {
                context: name,
                expected: n,
                actual: len,
            });
        }
    }
    if n == 0 {
        return Err(Error::Shape {
            context: "loss batch",
            expected: 1,
            actual: 0,
        });
    }
    let inv_n = 1.0 / n as f64;
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    let mut policy = 0.0;
    let mut value = 0.0;
    let mut clipped = 0usize;
    let mut d_log_prob = Vec::with_capacity(n);
    let mut d_value = Vec::with_capacity(n);
    for i in 0..n {
        let ratio = (batch.log_prob[i] - batch.old_log_prob[i]).exp();
        let a = batch.advantages[i];
        let unclipped = ratio * a;
        let clipped_term = ratio.clamp(lo, hi) * a;
        policy -= unclipped.min(clipped_term);
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        let saturated = (a > 0.0 && ratio > hi) || (a < 0.0 && ratio < lo);
        d_log_prob.push(if saturated { 0.0 } else { -unclipped * inv_n });
        let err = batch.values[i] - batch.returns[i];
        value += err * err;
        d_value.push(2.0 * cfg.value_coef * err * inv_n);
    }
    let policy_loss = policy * inv_n;
    let value_loss = value * inv_n;
    let loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * batch.entropy;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "ppo loss {loss} (policy {policy_loss}, value {value_loss}, entropy {})",
            batch.entropy
        )));
    }
    Ok(LossOutput {
        loss,
        policy_loss,
        value_loss,
        entropy: batch.entropy,
        clip_fraction: clipped as f64 * inv_n,
        d_log_prob,
        d_value,
    })
}

/// Gaussian policy over the pre-squash action `u`; the applied command is
/// `limit * tanh(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub actor: Mlp<f32>,
    pub log_std: f64,
    pub action_limit: f64,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, net: &NetConfig, action_limit: f64, rng: &mut R) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(net.actor_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let actor = Mlp::new(
            &sizes,
            net.activation,
            Activation::Identity,
            Init::Orthogonal {
                hidden_gain: net.hidden_gain,
                output_gain: net.actor_output_gain,
            },
            rng,
        )?;
        Ok(Self {
            actor,
            log_std: net.init_std.ln(),
            action_limit,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(self.log_std)
    }

    /// Pre-squash means for a batch of observations.
    pub fn means(&self, obs: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
        Ok(self.actor.predict(obs)?.iter().map(|&m| m as f64).collect())
    }

    pub fn squash(&self, u: f64) -> f64 {
        self.action_limit * u.tanh()
    }

    pub fn log_prob(&self, u: f64, mean: f64) -> f64 {
        gaussian_log_prob(u, mean, self.log_std)
    }

    /// Log-density of the squashed command `limit * tanh(u)`.
    pub fn squashed_log_prob(&self, u: f64, mean: f64) -> f64 {
        let t = u.tanh();
        self.log_prob(u, mean) - (self.action_limit * (1.0 - t * t)).max(f64::MIN_POSITIVE).ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        mean + self.std() * z
    }

    /// Command for one observation; the mean action when `deterministic`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f32], deterministic: bool, rng: &mut R) -> Result<f64> {
        let mean = self.actor.predict_one(obs)?[0] as f64;
        let u = if deterministic { mean } else { self.sample(mean, rng) };
        Ok(self.squash(u))
    }
}

/// Fixed-capacity storage for one iteration's transitions, step-major.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    num_envs: usize,
    steps: usize,
    obs_dim: usize,
    filled: usize,
    pub observations: Vec<f32>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub means: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize, steps: usize, obs_dim: usize) -> Self {
        let cap = num_envs * steps;
        Self {
            num_envs,
            steps,
            obs_dim,
            filled: 0,
            observations: Vec::with_capacity(cap * obs_dim),
            actions: Vec::with_capacity(cap),
            log_probs: Vec::with_capacity(cap),
            means: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            dones: Vec::with_capacity(cap),
            advantages: vec![0.0; cap],
            returns: vec![0.0; cap],
        }
    }

    pub fn capacity(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn len(&self) -> usize {
        self.filled * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.steps
    }

    pub fn clear(&mut self) {
        self.filled = 0;
        self.observations.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.means.clear();
        self.rewards.clear();
        self.values.clear();
        self.dones.clear();
    }

    /// Append one step for every environment.
    #[allow(clippy::too_many_arguments)]
    pub fn push_step(
        &mut self,
        observations: &[f32],
        actions: &[f64],
        log_probs: &[f64],
        means: &[f64],
        values: &[f64],
        transitions: &[Transition],
    ) -> Result<()> {
        if self.is_full() {
            return Err(Error::Shape {
                context: "rollout buffer push",
                expected: self.capacity(),
                actual: self.capacity() + self.num_envs,
            });
        }
        let n = self.num_envs;
        for (context, len, want) in [
            ("rollout observations", observations.len(), n * self.obs_dim),
            ("rollout actions", actions.len(), n),
            ("rollout log_probs", log_probs.len(), n),
            ("rollout means", means.len(), n),
            ("rollout values", values.len(), n),
            ("rollout transitions", transitions.len(), n),
        ] {
            if len != want {
                return Err(Error::Shape {
                    context,
                    expected: want,
                    actual: len,
                });
            }
        }
        self.observations.extend_from_slice(observations);
        self.actions.extend_from_slice(actions);
        self.log_probs.extend_from_slice(log_probs);
        self.means.extend_from_slice(means);
        self.values.extend_from_slice(values);
        self.rewards.extend(transitions.iter().map(|t| t.reward));
        self.dones.extend(transitions.iter().map(|t| t.done));
        self.filled += 1;
        Ok(())
    }

    /// GAE per environment; `bootstrap` holds each environment's value after the last step.
    pub fn compute_returns(&mut self, bootstrap: &[f64], gamma: f64, lambda: f64) -> Result<()> {
        if !self.is_full() {
            return Err(Error::Shape {
                context: "rollout buffer fill",
                expected: self.capacity(),
                actual: self.len(),
            });
        }
        let (n, t) = (self.num_envs, self.steps);
        let mut r = vec![0.0; t];
        let mut v = vec![0.0; t];
        let mut d = vec![false; t];
        for e in 0..n {
            for k in 0..t {
                r[k] = self.rewards[k * n + e];
                v[k] = self.values[k * n + e];
                d[k] = self.dones[k * n + e];
            }
            let (adv, ret) = gae(&r, &v, &d, bootstrap[e], gamma, lambda);
            for k in 0..t {
                self.advantages[k * n + e] = adv[k];
                self.returns[k * n + e] = ret[k];
            }
        }
        Ok(())
    }

    fn gather_observations(&self, idx: &[usize]) -> Array2<f32> {
        let d = self.obs_dim;
        let mut out = Array2::zeros((idx.len(), d));
        for (row, &i) in out.outer_iter_mut().zip(idx) {
            row.into_slice()
                .expect("contiguous row")
                .copy_from_slice(&self.observations[i * d..(i + 1) * d]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: u64,
    /// Mean return of the last completed episodes; NaN before the first one.
    pub mean_return: f64,
    pub mean_episode_length: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    pub entropy: f64,
}

const RETURN_WINDOW: usize = 100;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RNAVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub ppo: PpoConfig,
    pub net: NetConfig,
    pub policy: GaussianPolicy,
    pub critic: Mlp<f32>,
    pub actor_opt: Adam<f32>,
    pub log_std_opt: Adam<f64>,
    pub critic_opt: Adam<f32>,
    pub iteration: usize,
    pub env_steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Free-form description of the environment, e.g. its serialised config.
    pub env_config: Option<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * (self.policy.actor.num_params() + self.critic.num_params()) * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a checkpoint file (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(bincode::deserialize(&bytes[12..])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// PPO learner state. The environment is passed to each iteration.
pub struct Trainer {
    pub ppo: PpoConfig,
    pub net: NetConfig,
    pub policy: GaussianPolicy,
    pub critic: Mlp<f32>,
    actor_opt: Adam<f32>,
    log_std_opt: Adam<f64>,
    critic_opt: Adam<f32>,
    rng: ChaCha8Rng,
    seed: u64,
    iteration: usize,
    env_steps: u64,
    lr: f64,
    recent_returns: VecDeque<f64>,
    recent_lengths: VecDeque<usize>,
    buffer: RolloutBuffer,
    rollout_log_std: f64,
    obs: Vec<f32>,
}

impl Trainer {
    pub fn new(obs_dim: usize, action_limit: f64, ppo: PpoConfig, net: NetConfig, seed: u64) -> Result<Self> {
        ppo.validate()?;
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = GaussianPolicy::new(obs_dim, &net, action_limit, &mut rng)?;
        let critic_sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(net.critic_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let critic = Mlp::new(
            &critic_sizes,
            net.activation,
            Activation::Identity,
            Init::Orthogonal {
                hidden_gain: net.hidden_gain,
                output_gain: net.critic_output_gain,
            },
            &mut rng,
        )?;
        let lr = ppo.learning_rate;
        let rollout_log_std = policy.log_std;
        let buffer = RolloutBuffer::new(ppo.num_envs, ppo.steps_per_env(), obs_dim);
        Ok(Self {
            actor_opt: Adam::new(policy.actor.num_params(), lr),
            log_std_opt: Adam::new(1, lr),
            critic_opt: Adam::new(critic.num_params(), lr),
            policy,
            critic,
            ppo,
            net,
            rng,
            seed,
            iteration: 0,
            env_steps: 0,
            lr,
            recent_returns: VecDeque::with_capacity(RETURN_WINDOW),
            recent_lengths: VecDeque::with_capacity(RETURN_WINDOW),
            rollout_log_std,
            buffer,
            obs: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn checkpoint(&self, env_config: Option<String>) -> Checkpoint {
        Checkpoint {
            ppo: self.ppo.clone(),
            net: self.net.clone(),
            policy: self.policy.clone(),
            critic: self.critic.clone(),
            actor_opt: self.actor_opt.clone(),
            log_std_opt: self.log_std_opt.clone(),
            critic_opt: self.critic_opt.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            learning_rate: self.lr,
            seed: self.seed,
            env_config,
        }
    }

    fn check_env<E: VectorEnv + ?Sized>(&self, env: &E) -> Result<()> {
        if env.num_envs() != self.ppo.num_envs {
            return Err(Error::Shape {
                context: "environment count",
                expected: self.ppo.num_envs,
                actual: env.num_envs(),
            });
        }
        if env.obs_dim() != self.policy.obs_dim() {
            return Err(Error::Shape {
                context: "observation size",
                expected: self.policy.obs_dim(),
                actual: env.obs_dim(),
            });
        }
        Ok(())
    }

    fn values(&self, obs: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
        Ok(self.critic.predict(obs)?.iter().map(|&v| v as f64).collect())
    }

    /// Fill the rollout buffer with the current policy.
    pub fn collect<E: VectorEnv + ?Sized>(&mut self, env: &mut E) -> Result<()> {
        self.check_env(env)?;
        let n = env.num_envs();
        let d = env.obs_dim();
        self.buffer.clear();
        let mut obs = std::mem::take(&mut self.obs);
        for _ in 0..self.ppo.steps_per_env() {
            env.observations(&mut obs);
            let view = ArrayView2::from_shape((n, d), &obs).map_err(|_| Error::Shape {
                context: "batched observations",
                expected: n * d,
                actual: obs.len(),
            })?;
            let means = self.policy.means(view)?;
            let values = self.values(view)?;
            let mut actions = Vec::with_capacity(n);
            let mut log_probs = Vec::with_capacity(n);
            let mut commands = Vec::with_capacity(n);
            for &m in &means {
                let u = self.policy.sample(m, &mut self.rng);
                actions.push(u);
                log_probs.push(self.policy.log_prob(u, m));
                commands.push(self.policy.squash(u));
            }
            let transitions = env.step(&commands)?;
            for t in &transitions {
                if let Some(ep) = t.episode {
                    if self.recent_returns.len() == RETURN_WINDOW {
                        self.recent_returns.pop_front();
                        self.recent_lengths.pop_front();
                    }
                    self.recent_returns.push_back(ep.episode_return);
                    self.recent_lengths.push_back(ep.length);
                }
            }
            self.buffer.push_step(&obs, &actions, &log_probs, &means, &values, &transitions)?;
            self.env_steps += n as u64;
        }
        env.observations(&mut obs);
        let view = ArrayView2::from_shape((n, d), &obs).expect("checked above");
        let bootstrap = self.values(view)?;
        self.obs = obs;
        self.buffer.compute_returns(&bootstrap, self.ppo.gamma, self.ppo.lambda)
    }

    /// Run epochs of minibatch updates on the filled buffer.
    /// Returns mean KL, mean clip fraction.
    fn update(&mut self) -> Result<(f64, f64)> {
        let total = self.buffer.len();
        let mb = total / self.ppo.minibatches;
        let mut advantages = self.buffer.advantages.clone();
        normalize(&mut advantages);
        let mut order: Vec<usize> = (0..total).collect();
        let mut actor_grads = vec![0f32; self.policy.actor.num_params()];
        let mut critic_grads = vec![0f32; self.critic.num_params()];
        let (mut kl_sum, mut clip_sum, mut updates) = (0.0, 0.0, 0usize);
        for _ in 0..self.ppo.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(mb) {
                let x = self.buffer.gather_observations(chunk);
                let (mean_out, actor_cache) = self.policy.actor.forward(x.view())?;
                let (value_out, critic_cache) = self.critic.forward(x.view())?;
                let ls = self.policy.log_std;
                let inv_var = (-2.0 * ls).exp();
                let mut log_prob = Vec::with_capacity(chunk.len());
                let mut old_log_prob = Vec::with_capacity(chunk.len());
                let mut adv = Vec::with_capacity(chunk.len());
                let mut values = Vec::with_capacity(chunk.len());
                let mut returns = Vec::with_capacity(chunk.len());
                let mut kl = 0.0;
                let old_ls = self.rollout_log_std;
                for (j, &i) in chunk.iter().enumerate() {
                    let mu = mean_out[[j, 0]] as f64;
                    log_prob.push(gaussian_log_prob(self.buffer.actions[i], mu, ls));
                    old_log_prob.push(self.buffer.log_probs[i]);
                    adv.push(advantages[i]);
                    values.push(value_out[[j, 0]] as f64);
                    returns.push(self.buffer.returns[i]);
                    kl += gaussian_kl(self.buffer.means[i], old_ls, mu, ls);
                }
                kl /= chunk.len() as f64;
                if self.ppo.schedule == LrSchedule::Adaptive {
                    self.lr = adapt_lr_bounded(self.lr, kl, self.ppo.desired_kl, self.ppo.lr_min, self.ppo.lr_max);
                }
                let out = surrogate_loss(
                    &LossInputs {
                        log_prob: &log_prob,
                        old_log_prob: &old_log_prob,
                        advantages: &adv,
                        values: &values,
                        returns: &returns,
                        entropy: gaussian_entropy(ls),
                    },
                    &self.ppo,
                )
                .map_err(|e| Error::Diverged {
                    iteration: self.iteration,
                    reason: e.to_string(),
                })?;
                let mut d_mean = Array2::<f32>::zeros((chunk.len(), 1));
                let mut d_log_std = -self.ppo.entropy_coef;
                for (j, &i) in chunk.iter().enumerate() {
                    let z = self.buffer.actions[i] - mean_out[[j, 0]] as f64;
                    let g = out.d_log_prob[j];
                    d_mean[[j, 0]] = (g * z * inv_var) as f32;
                    d_log_std += g * (z * z * inv_var - 1.0);
                }
                let d_value = Array2::from_shape_fn((chunk.len(), 1), |(j, _)| out.d_value[j] as f32);
                actor_grads.fill(0.0);
                critic_grads.fill(0.0);
                self.policy.actor.backward_into(&actor_cache, d_mean.view(), &mut actor_grads, false)?;
                self.critic.backward_into(&critic_cache, d_value.view(), &mut critic_grads, false)?;
                let norm = (grad_norm(&actor_grads).powi(2) + grad_norm(&critic_grads).powi(2) + d_log_std * d_log_std).sqrt();
                if !norm.is_finite() || norm > self.ppo.abort_grad_norm {
                    return Err(Error::Diverged {
                        iteration: self.iteration,
                        reason: format!("gradient norm {norm}"),
                    });
                }
                if norm > self.ppo.max_grad_norm {
                    let s = self.ppo.max_grad_norm / (norm + 1e-6);
                    actor_grads.iter_mut().for_each(|g| *g *= s as f32);
                    critic_grads.iter_mut().for_each(|g| *g *= s as f32);
                    d_log_std *= s;
                }
                self.actor_opt.lr = self.lr;
                self.log_std_opt.lr = self.lr;
                self.critic_opt.lr = self.lr;
                self.actor_opt.step(self.policy.actor.params_mut(), &actor_grads)?;
                self.critic_opt.step(self.critic.params_mut(), &critic_grads)?;
                let mut ls_param = [self.policy.log_std];
                self.log_std_opt.step(&mut ls_param, &[d_log_std])?;
                self.policy.log_std = ls_param[0];
                kl_sum += kl;
                clip_sum += out.clip_fraction;
                updates += 1;
            }
        }
        Ok((kl_sum / updates as f64, clip_sum / updates as f64))
    }

    /// One collect-and-update iteration.
    pub fn iterate<E: VectorEnv + ?Sized>(&mut self, env: &mut E) -> Result<IterationMetrics> {
        self.collect(env)?;
        self.rollout_log_std = self.policy.log_std;
        let (kl, clip_fraction) = self.update()?;
        self.iteration += 1;
        if !self.policy.actor.is_finite() || !self.critic.is_finite() || !self.policy.log_std.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                reason: "non-finite parameters".into(),
            });
        }
        let mean = |v: &VecDeque<f64>| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let lengths: VecDeque<f64> = self.recent_lengths.iter().map(|&l| l as f64).collect();
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_return: mean(&self.recent_returns),
            mean_episode_length: mean(&lengths),
            kl,
            clip_fraction,
            lr: self.lr,
            entropy: self.policy.entropy(),
        })
    }
}

/// Whether training should go on after an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Artifact locations for [`train`]; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub env_config: Option<String>,
}

pub const METRICS_HEADER: [&str; 8] = [
    "iteration",
    "env_steps",
    "mean_return",
    "mean_episode_length",
    "kl",
    "clip_fraction",
    "lr",
    "entropy",
];

pub fn metrics_writer<W: Write>(out: W) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    Ok(w)
}

pub fn write_metrics<W: Write>(w: &mut csv::Writer<W>, m: &IterationMetrics) -> Result<()> {
    w.write_record([
        m.iteration.to_string(),
        m.env_steps.to_string(),
        m.mean_return.to_string(),
        m.mean_episode_length.to_string(),
        m.kl.to_string(),
        m.clip_fraction.to_string(),
        m.lr.to_string(),
        m.entropy.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Train for up to `iterations` iterations, logging metrics and writing
/// periodic checkpoints. On divergence the current state is checkpointed as
/// `diverged.bin` before the error is returned.
pub fn train<E, F>(
    env: &mut E,
    trainer: &mut Trainer,
    iterations: usize,
    output: &TrainOutput,
    mut on_iteration: F,
) -> Result<Vec<IterationMetrics>>
where
    E: VectorEnv + ?Sized,
    F: FnMut(&Trainer, &IterationMetrics) -> Result<Control>,
{
    let mut log = match &output.metrics_csv {
        Some(p) => Some(metrics_writer(fs::File::create(p).map_err(|e| Error::file(p, e))?)?),
        None => None,
    };
    if let Some(dir) = &output.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let save = |trainer: &Trainer, name: &str| -> Result<()> {
        if let Some(dir) = &output.checkpoint_dir {
            trainer.checkpoint(output.env_config.clone()).save(&dir.join(name))?;
        }
        Ok(())
    };
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let m = match trainer.iterate(env) {
            Ok(m) => m,
            Err(e @ Error::Diverged { .. }) => {
                save(trainer, "diverged.bin")?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "iter {} steps {} return {:.3} len {:.1} kl {:.4} lr {:.2e}",
            m.iteration,
            m.env_steps,
            m.mean_return,
            m.mean_episode_length,
            m.kl,
            m.lr
        );
        if let Some(w) = log.as_mut() {
            write_metrics(w, &m)?;
        }
        history.push(m);
        let interval = trainer.ppo.checkpoint_interval;
        if interval > 0 && m.iteration % interval == 0 {
            save(trainer, &format!("iter_{:05}.bin", m.iteration))?;
        }
        if on_iteration(trainer, &m)? == Control::Stop {
            break;
        }
    }
    save(trainer, "final.bin")?;
    Ok(history)
}
