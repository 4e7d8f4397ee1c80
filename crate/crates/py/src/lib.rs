//! Python bindings: plantation maps, LiDAR sweeps, row maps, the
//! environment, checkpoints and evaluation.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rownav::bench::{self, Agent};
use rownav::config::{ConfigBuilder, Preset, RunConfig};
use rownav::env::{Env, EnvSeeds};
use rownav::geometry::{Point2, Pose2};
use rownav::ppo::{self, Checkpoint};
use rownav::rowmap;
use rownav::sensor::{self, PointCloud};
use rownav::world::{self, RowSpec};
use rownav::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::File { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::InvalidConfig(_)
        | Error::SealedCorridor { .. }
        | Error::Shape { .. }
        | Error::Parse { .. }
        | Error::Version { .. }
        | Error::VoxelOutsideRoi { .. }
        | Error::NonFinite(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Preset, optional TOML text and `key=value` overrides.
fn run_config(preset: Option<&str>, toml: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<RunConfig> {
    let preset = preset.map(Preset::parse).transpose().map_err(to_py)?;
    let mut b = ConfigBuilder::new(preset);
    if let Some(t) = toml {
        b = b.merge_toml(t).map_err(to_py)?;
    }
    for o in overrides.unwrap_or_default() {
        b = b.set(&o).map_err(to_py)?;
    }
    b.build().map_err(to_py)
}

/// Effective configuration as TOML.
#[pyfunction]
#[pyo3(signature = (preset=None, toml=None, overrides=None))]
fn config(preset: Option<&str>, toml: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<String> {
    run_config(preset, toml, overrides)?.to_toml().map_err(to_py)
}

/// A generated plantation corridor.
#[pyclass(name = "PlantationMap", module = "rownav_py")]
struct PyMap {
    inner: Arc<world::PlantationMap>,
}

#[pymethods]
impl PyMap {
    #[staticmethod]
    #[pyo3(signature = (frequency=0.0, amplitude=0.0, row_length=10.0, seed=0))]
    fn generate(frequency: f64, amplitude: f64, row_length: f64, seed: u64) -> PyResult<Self> {
        let spec = RowSpec::from_curve(frequency, amplitude, row_length).with_seed(seed);
        Ok(Self {
            inner: Arc::new(world::generate(&spec).map_err(to_py)?),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(world::PlantationMap::from_json(text).map_err(to_py)?),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn row_length(&self) -> f64 {
        self.inner.row_length()
    }

    #[getter]
    fn plant_count(&self) -> usize {
        self.inner.plants().len()
    }

    /// Plants as `(x, y, radius)` tuples.
    fn plants(&self) -> Vec<(f64, f64, f64)> {
        self.inner
            .plants()
            .iter()
            .map(|p| (p.center.x, p.center.y, p.radius))
            .collect()
    }

    /// Arc length along the centerline of the closest point to `(x, y)`.
    fn progress(&self, x: f64, y: f64) -> f64 {
        self.inner.progress(Point2 { x, y })
    }

    /// Whether the default robot footprint at this pose touches a plant.
    fn collides(&self, x: f64, y: f64, theta: f64) -> bool {
        self.inner
            .collides(&Pose2::new(x, y, theta), &world::Footprint::default())
    }

    /// One LiDAR sweep from a sensor pose; points in the sensor frame.
    #[pyo3(signature = (x, y, theta, noise_seed=0))]
    fn sweep(&self, x: f64, y: f64, theta: f64, noise_seed: u64) -> Vec<(f64, f64, f64)> {
        let cloud = sensor::sweep(
            &Pose2::new(x, y, theta),
            &self.inner,
            &sensor::LidarConfig::default(),
            noise_seed,
        );
        cloud.points.iter().map(|p| (p[0], p[1], p[2])).collect()
    }
}

/// Row map of a point cloud with the default voxel grid, as nested rows
/// (far row first, leftmost column first).
#[pyfunction]
fn row_map(points: Vec<(f64, f64, f64)>) -> Vec<Vec<f64>> {
    let spec = rowmap::VoxelGridSpec::default();
    let cloud = PointCloud::from_points(points.into_iter().map(|(x, y, z)| [x, y, z]).collect());
    let map = rowmap::transform(&cloud, &spec);
    let (nx, ny) = map.dims();
    (0..nx)
        .rev()
        .map(|ix| (0..ny).rev().map(|iy| map.get(ix, iy)).collect())
        .collect()
}

/// Row map text grid of a point cloud.
#[pyfunction]
fn row_map_text(points: Vec<(f64, f64, f64)>) -> String {
    let cloud = PointCloud::from_points(points.into_iter().map(|(x, y, z)| [x, y, z]).collect());
    rowmap::transform(&cloud, &rowmap::VoxelGridSpec::default()).to_text()
}

/// Generalised advantage estimation for one sequence.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, bootstrap_value, gamma=0.99, lam=0.95))]
fn gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    bootstrap_value: f64,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() || dones.len() != rewards.len() {
        return Err(PyValueError::new_err("rewards, values and dones must have equal length"));
    }
    Ok(ppo::gae(&rewards, &values, &dones, bootstrap_value, gamma, lam))
}

/// A single row-following environment.
#[pyclass(name = "Env", module = "rownav_py")]
struct PyEnv {
    inner: Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (seed=0, preset=None, toml=None, overrides=None))]
    fn new(seed: u64, preset: Option<&str>, toml: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let cfg = run_config(preset, toml, overrides)?;
        let env = Env::new(Arc::new(cfg.sim()), EnvSeeds::from_base(seed)).map_err(to_py)?;
        Ok(Self { inner: env })
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.config().obs_dim()
    }

    fn reset(&mut self) -> PyResult<Vec<f32>> {
        Ok(self.inner.reset().map_err(to_py)?.data)
    }

    /// Returns `(observation, reward, terminated, info)`.
    fn step<'py>(&mut self, py: Python<'py>, omega: f64) -> PyResult<(Vec<f32>, f64, bool, Bound<'py, PyDict>)> {
        let r = self.inner.step(omega).map_err(to_py)?;
        let info = PyDict::new(py);
        info.set_item("progress", r.info.progress_m)?;
        info.set_item("collided", r.info.collided)?;
        info.set_item("elapsed", r.info.elapsed_s)?;
        if let Some(ep) = r.info.episode {
            info.set_item("episode_return", ep.episode_return)?;
            info.set_item("episode_length", ep.length)?;
        }
        Ok((r.observation.data, r.reward, r.terminated, info))
    }

    /// Robot pose `(x, y, theta)`.
    fn pose(&self) -> (f64, f64, f64) {
        let p = self.inner.state().pose;
        (p.x, p.y, p.theta)
    }
}

/// A trained policy loaded from a checkpoint.
#[pyclass(name = "Policy", module = "rownav_py")]
struct PyPolicy {
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            checkpoint: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.checkpoint.policy.obs_dim()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.checkpoint.iteration
    }

    /// Yaw-rate command for one observation.
    #[pyo3(signature = (observation, deterministic=true, seed=0))]
    fn act(&self, observation: Vec<f32>, deterministic: bool, seed: u64) -> PyResult<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.checkpoint
            .policy
            .act(&observation, deterministic, &mut rng)
            .map_err(to_py)
    }
}

/// Evaluate a scripted agent or a checkpoint on one row configuration and
/// return the summary statistics.
#[pyfunction]
#[pyo3(signature = (agent="scripted-zero", checkpoint=None, frequency=0.0, amplitude=0.0, row_length=100.0, trials=15, seed=2024, deterministic=false))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    agent: &str,
    checkpoint: Option<PathBuf>,
    frequency: f64,
    amplitude: f64,
    row_length: f64,
    trials: usize,
    seed: u64,
    deterministic: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let (agent, mut cfg) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(&path).map_err(to_py)?;
            let cfg = match &ck.env_config {
                Some(t) => RunConfig::from_toml(t).map_err(to_py)?,
                None => RunConfig::default(),
            };
            (
                Agent::Policy {
                    policy: Arc::new(ck.policy),
                    deterministic,
                },
                cfg,
            )
        }
        None => {
            let a = match agent.split_once(':') {
                None if agent == "scripted-zero" => Agent::ScriptedZero,
                Some(("scripted-constant", w)) => Agent::ScriptedConstant(
                    w.parse().map_err(|_| PyValueError::new_err(format!("bad yaw rate in {agent:?}")))?,
                ),
                _ => return Err(PyValueError::new_err(format!("unknown agent {agent:?}"))),
            };
            (a, RunConfig::default())
        }
    };
    cfg.bench.pairs = vec![(frequency, amplitude)];
    cfg.bench.row_length = row_length;
    cfg.bench.trials = trials;
    cfg.bench.seed = seed;
    let rows = py
        .detach(|| bench::sweep(&cfg.sim(), &agent, &cfg.bench))
        .map_err(to_py)?;
    let row = &rows[0];
    let s = row
        .summary
        .ok_or_else(|| PyRuntimeError::new_err(row.error.clone().unwrap_or_default()))?;
    let out = PyDict::new(py);
    out.set_item("avg_distance", s.avg_distance)?;
    out.set_item("std_distance", s.std_distance)?;
    out.set_item("avg_time", s.avg_time)?;
    out.set_item("std_time", s.std_time)?;
    out.set_item("success_rate", s.success_rate)?;
    out.set_item("trials", s.trials)?;
    out.set_item("distances", row.results.iter().map(|r| r.distance).collect::<Vec<_>>())?;
    Ok(out)
}

#[pymodule]
fn rownav_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMap>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(row_map, m)?)?;
    m.add_function(wrap_pyfunction!(row_map_text, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
