//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 2 5`.
//! Artifacts of the training criteria are kept under `$ROWNAV_ACCEPTANCE_DIR`
//! when set, otherwise in a temporary directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rownav::bench::{self, Agent};
use rownav::config::{ConfigBuilder, Preset, RunConfig};
use rownav::env::{self, RobotState, VecEnv};
use rownav::geometry::Pose2;
use rownav::nn::{Activation, Init, Mlp};
use rownav::ppo::{self, Control, Trainer, TrainOutput};
use rownav::rng::derive_seed;
use rownav::rowmap::{self, VoxelGridSpec};
use rownav::sensor::{self, PointCloud};
use rownav::world;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn(&Path) -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn compression(_: &Path) -> Outcome {
    let cfg = RunConfig::default();
    let map = world::generate(&world::RowSpec::straight(10.0)).map_err(err)?;
    let cloud = sensor::sweep(&Pose2::new(1.0, 0.0, 0.0), &map, &cfg.sensor, 1);
    let rays = cfg.sensor.ray_count();
    ensure(rays == 7200, || format!("{rays} rays"))?;
    let raw = env::raw_cloud_frame(&cloud, &cfg.sensor).len();
    ensure(raw == 21600, || format!("raw frame has {raw} scalars"))?;
    let cells = rowmap::transform(&cloud, &cfg.rowmap).len();
    ensure(cells == 900, || format!("row map has {cells} cells"))?;
    let reduction = 100.0 * (1.0 - cells as f64 / raw as f64);
    ensure(format!("{reduction:.2}") == "95.83", || format!("reduction {reduction}%"))?;
    Ok(format!("{rays} rays, {} returns -> {cells} cells, {reduction:.2}% reduction", cloud.len()))
}

/// Per-point binning into a hash set, then a per-column count.
fn brute_force_counts(points: &[[f64; 3]], spec: &VoxelGridSpec) -> BTreeMap<(i64, i64), usize> {
    let lo = |v: f64, d: f64| (v / d).round() as i64;
    let (x0, x1) = (lo(spec.roi_x[0], spec.delta[0]), lo(spec.roi_x[1], spec.delta[0]));
    let (y0, y1) = (lo(spec.roi_y[0], spec.delta[1]), lo(spec.roi_y[1], spec.delta[1]));
    let z0 = lo(spec.z_min, spec.delta[2]);
    let z1 = z0 + spec.height_levels as i64;
    let mut occupied = HashSet::new();
    for p in points {
        let i = (p[0] / spec.delta[0]).floor() as i64;
        let j = (p[1] / spec.delta[1]).floor() as i64;
        let k = (p[2] / spec.delta[2]).floor() as i64;
        if (x0..x1).contains(&i) && (y0..y1).contains(&j) && (z0..z1).contains(&k) {
            occupied.insert((i - x0, j - y0, k));
        }
    }
    let mut counts = BTreeMap::new();
    for (i, j, _) in occupied {
        *counts.entry((i, j)).or_insert(0) += 1;
    }
    counts
}

fn downsampling_oracle(_: &Path) -> Outcome {
    let spec = VoxelGridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total_points = 0;
    for cloud_idx in 0..1000 {
        let n = rng.random_range(0..3000);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let mut p = [
                    rng.random_range(-0.5..3.5),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.5..0.5),
                ];
                // some points on voxel faces
                if rng.random_bool(0.1) {
                    for (a, d) in p.iter_mut().zip(spec.delta) {
                        *a = (*a / d).round() * d;
                    }
                }
                p
            })
            .collect();
        total_points += n;
        let expected = brute_force_counts(&points, &spec);
        let map = rowmap::transform(&PointCloud::from_points(points), &spec);
        let (nx, ny) = map.dims();
        for ix in 0..nx {
            for iy in 0..ny {
                let want = expected.get(&(ix as i64, iy as i64)).copied().unwrap_or(0);
                let got = map.count(ix, iy);
                ensure(got == want, || format!("cloud {cloud_idx}, cell ({ix},{iy}): {got} != {want}"))?;
            }
        }
    }
    Ok(format!("1000 clouds, {total_points} points, all cells equal"))
}

fn gradient_check(_: &Path) -> Outcome {
    let net = RunConfig::default().nn;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut configs = Vec::new();
    for preset in Preset::ALL {
        let obs = preset.config().sim().obs_dim();
        configs.push(("actor", obs, net.actor_hidden.clone(), net.actor_output_gain));
        configs.push(("critic", obs, net.critic_hidden.clone(), net.critic_output_gain));
    }
    configs.push(("small", 7, vec![5, 4], 1.0));
    for (role, obs, hidden, out_gain) in configs {
        let sizes: Vec<usize> = std::iter::once(obs).chain(hidden).chain(std::iter::once(1)).collect();
        let init = Init::Orthogonal {
            hidden_gain: net.hidden_gain,
            output_gain: out_gain,
        };
        for (hidden_act, out_act) in [(Activation::Elu, Activation::Identity), (Activation::Tanh, Activation::Tanh)] {
            let mut mlp = Mlp::<f64>::new(&sizes, hidden_act, out_act, init, &mut rng).map_err(err)?;
            // biases away from zero so every parameter matters
            for l in 0..mlp.num_layers() {
                let (b_off, end) = (mlp.layer_offsets(l).1, sizes[l + 1]);
                for b in &mut mlp.params_mut()[b_off..b_off + end] {
                    *b = rng.random_range(-0.1..0.1);
                }
            }
            let batch = 3;
            let input = Array2::from_shape_fn((batch, obs), |_| {
                if rng.random_bool(0.1) {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let weights = Array2::from_shape_fn((batch, 1), |_| rng.random_range(-1.0..1.0));
            let loss = |m: &Mlp<f64>| -> f64 { (&m.predict(input.view()).unwrap() * &weights).sum() };
            let (out, cache) = mlp.forward(input.view()).map_err(err)?;
            // gradients far below the loss scale are floored: their FD noise is eps * |loss| / h
            let floor = 1e-4 * (&out * &weights).mapv(f64::abs).sum();
            let (grads, _) = mlp.backward(&cache, weights.view()).map_err(err)?;
            let mut picks = Vec::new();
            for l in 0..mlp.num_layers() {
                let (w_off, b_off) = mlp.layer_offsets(l);
                let n_out = sizes[l + 1];
                for _ in 0..6 {
                    picks.push(rng.random_range(w_off..b_off));
                    picks.push(rng.random_range(b_off..b_off + n_out));
                }
                // weights fed by non-zero inputs
                let active: Vec<usize> = (0..sizes[l]).filter(|&i| l > 0 || input[[0, i]] != 0.0).collect();
                for _ in 0..6 {
                    let i = active[rng.random_range(0..active.len())];
                    picks.push(w_off + i * n_out + rng.random_range(0..n_out));
                }
            }
            for p in picks {
                let orig = mlp.params()[p];
                let h = 1e-5 * orig.abs().max(1.0);
                mlp.params_mut()[p] = orig + h;
                let up = loss(&mlp);
                mlp.params_mut()[p] = orig - h;
                let down = loss(&mlp);
                mlp.params_mut()[p] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grads[p]).abs() / fd.abs().max(grads[p].abs()).max(floor);
                ensure(rel <= 1e-6, || {
                    format!("{role} {sizes:?} {hidden_act:?}: param {p} analytic {} fd {fd} rel {rel:e}", grads[p])
                })?;
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} parameters over 14 networks, worst relative error {worst:.1e}"))
}

fn gae_oracle(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gamma = 0.99;
    let mut worst = 0.0f64;
    let (mut all_r, mut all_v, mut all_d, mut all_expected) = (vec![], vec![], vec![], vec![]);
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..5.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let terminal = rng.random_bool(0.5);
        let bootstrap = if terminal { 0.0 } else { rng.random_range(-10.0..10.0) };
        let mut dones = vec![false; n];
        dones[n - 1] = terminal;
        let expected: Vec<f64> = (0..n)
            .map(|k| {
                let mut g = 0.0;
                let mut discount = 1.0;
                for r in &rewards[k..] {
                    g += discount * r;
                    discount *= gamma;
                }
                g + discount * bootstrap - values[k]
            })
            .collect();
        let (adv, ret) = ppo::gae(&rewards, &values, &dones, bootstrap, gamma, 1.0);
        for k in 0..n {
            worst = worst.max((adv[k] - expected[k]).abs());
            worst = worst.max((ret[k] - (expected[k] + values[k])).abs());
        }
        if terminal {
            all_r.extend(&rewards);
            all_v.extend(&values);
            all_d.extend(&dones);
            all_expected.extend(expected);
        }
    }
    // terminal episodes back to back in one stream
    let (adv, _) = ppo::gae(&all_r, &all_v, &all_d, 0.0, gamma, 1.0);
    for (a, e) in adv.iter().zip(&all_expected) {
        worst = worst.max((a - e).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 episodes, max deviation {worst:.1e}"))
}

fn reward_contract(_: &Path) -> Outcome {
    let cfg = RunConfig::default();
    let rc = cfg.env.reward;
    let (v, dt) = (cfg.env.speed, cfg.env.dt);
    let state = |last: f64| RobotState {
        pose: Pose2::new(0.0, 0.0, 0.0),
        speed: v,
        last_omega: last,
    };
    let r = |last: f64, omega: f64, hit: bool| env::reward(&state(last), &state(omega), omega, hit, &rc, dt);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    ensure(close(r(0.3, 0.3, false), 0.28175), || format!("zero change: {}", r(0.3, 0.3, false)))?;
    ensure(close(r(0.0, 1.5, true), -1.0), || format!("full suppression with collision: {}", r(0.0, 1.5, true)))?;
    ensure(close(r(0.0, 2.0, false), 0.0), || "full suppression".into())?;
    let half = (rc.sigma / 2.0).sqrt();
    ensure(close(r(0.1, 0.1 + half, false), 0.140875), || format!("midpoint: {}", r(0.1, 0.1 + half, false)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let top = 5.0 * v * dt;
    for _ in 0..100_000 {
        let last = rng.random_range(-1.5..1.5);
        let omega = rng.random_range(-1.5..1.5);
        let hit = rng.random_bool(0.2);
        let value = r(last, omega, hit);
        ensure((-1.0..=top).contains(&value), || format!("reward {value} outside [-1, {top}]"))?;
        // larger change, never larger reward
        let d1 = rng.random_range(0.0..3.0f64);
        let d2 = d1 + rng.random_range(0.0..1.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        ensure(r(last, last + sign * d2, hit) <= r(last, last + sign * d1, hit), || {
            format!("penalty not monotone at last={last} d1={d1} d2={d2}")
        })?;
    }
    Ok("bounds and monotonicity over 100000 samples, three worked examples".into())
}

fn closed_form_traversal(_: &Path) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.bench.pairs = vec![(0.0, 0.0)];
    cfg.bench.row_length = 100.0;
    cfg.bench.trials = 5;
    let rows = bench::sweep(&cfg.sim(), &Agent::ScriptedZero, &cfg.bench).map_err(err)?;
    let s = rows[0].summary.ok_or_else(|| rows[0].error.clone().unwrap_or_default())?;
    ensure((s.avg_distance - 100.0).abs() <= 0.06 && s.std_distance <= 0.06, || {
        format!("distance {} +- {}", s.avg_distance, s.std_distance)
    })?;
    ensure((s.avg_time - 177.46).abs() <= 0.2 && s.std_time <= 0.2, || format!("time {} +- {}", s.avg_time, s.std_time))?;
    ensure(s.success_rate == 1.0, || format!("success rate {}", s.success_rate))?;
    Ok(format!("{} trials: {:.3} m in {:.2} s", s.trials, s.avg_distance, s.avg_time))
}

const VALIDATION_EVERY: usize = 10;
const VALIDATION_TRIALS: usize = 40;
/// Consecutive perfect validation rounds that end training early.
const VALIDATION_STREAK: usize = 3;

fn training_reproduction(dir: &Path) -> Outcome {
    let cfg = ConfigBuilder::new(Some(Preset::Baseline))
        .set("world.pattern=straight")
        .and_then(|b| b.set("world.row_length=25.0"))
        .and_then(|b| b.build())
        .map_err(err)?;
    let iterations = 500;
    let sim = cfg.sim();
    let eval_spec = bench::SweepSpec {
        pairs: vec![(0.0, 0.0)],
        row_length: 25.0,
        ..cfg.bench.clone()
    };
    let eval_sim = Arc::new(eval_spec.config_for(&sim, 0.0, 0.0));
    // disjoint from the held-out evaluation seeds
    let validation_seeds = bench::trial_seeds(derive_seed(cfg.seed, 77), VALIDATION_TRIALS);
    let mut envs = VecEnv::new(sim.clone(), cfg.ppo.num_envs, derive_seed(cfg.seed, 1)).map_err(err)?;
    let mut trainer = Trainer::new(
        sim.obs_dim(),
        sim.env.omega_max,
        cfg.ppo.clone(),
        cfg.nn.clone(),
        derive_seed(cfg.seed, 0),
    )
    .map_err(err)?;
    let out_dir = dir.join("straight25");
    std::fs::create_dir_all(out_dir.join("checkpoints")).map_err(err)?;
    let output = TrainOutput {
        metrics_csv: Some(out_dir.join("metrics.csv")),
        checkpoint_dir: Some(out_dir.join("checkpoints")),
        env_config: Some(cfg.to_toml().map_err(err)?),
    };
    // latest policy with the most validation successes: (successes, iteration, policy)
    let mut best: Option<(usize, usize, ppo::GaussianPolicy)> = None;
    let mut streak = 0;
    let mut log = String::new();
    ppo::train(&mut envs, &mut trainer, iterations, &output, |t, m| {
        if m.iteration % VALIDATION_EVERY != 0 {
            return Ok(Control::Continue);
        }
        let agent = Agent::Policy {
            policy: Arc::new(t.policy.clone()),
            deterministic: false,
        };
        let results = bench::run_trials(&eval_sim, &agent, &validation_seeds)?;
        let ok = results.iter().filter(|r| r.success).count();
        let line = format!(
            "iter {:>3}  return {:>6.2}  std {:.3}  validation {ok}/{VALIDATION_TRIALS}",
            m.iteration,
            m.mean_return,
            t.policy.std()
        );
        eprintln!("  {line}");
        log += &line;
        log.push('\n');
        if best.as_ref().is_none_or(|b| ok >= b.0) {
            best = Some((ok, m.iteration, t.policy.clone()));
        }
        streak = if ok == VALIDATION_TRIALS { streak + 1 } else { 0 };
        Ok(if streak == VALIDATION_STREAK { Control::Stop } else { Control::Continue })
    })
    .map_err(err)?;
    std::fs::write(out_dir.join("validation.txt"), &log).map_err(err)?;
    let (val_ok, iteration, policy) = best.ok_or("no validation round ran")?;
    let agent = Agent::Policy {
        policy: Arc::new(policy),
        deterministic: false,
    };
    let rows = bench::sweep(&sim, &agent, &eval_spec).map_err(err)?;
    let results = &rows[0].results;
    let ok = results.iter().filter(|r| r.success).count();
    let detail = format!(
        "policy from iteration {iteration} (validation {val_ok}/{VALIDATION_TRIALS}): {ok}/{} held-out stochastic trials completed",
        results.len()
    );
    ensure(ok >= 14, || detail.clone())?;
    Ok(detail)
}

fn ablation_contract(dir: &Path) -> Outcome {
    let mut notes = Vec::new();
    for preset in [Preset::NoHistory, Preset::NoDownsampling] {
        let cfg = preset.config();
        let sim = cfg.sim();
        let mut envs = VecEnv::new(sim.clone(), cfg.ppo.num_envs, derive_seed(cfg.seed, 1)).map_err(err)?;
        let mut trainer = Trainer::new(
            sim.obs_dim(),
            sim.env.omega_max,
            cfg.ppo.clone(),
            cfg.nn.clone(),
            derive_seed(cfg.seed, 0),
        )
        .map_err(err)?;
        let out_dir = dir.join(preset.name());
        std::fs::create_dir_all(&out_dir).map_err(err)?;
        let csv = out_dir.join("metrics.csv");
        let output = TrainOutput {
            metrics_csv: Some(csv.clone()),
            checkpoint_dir: None,
            env_config: None,
        };
        let start = Instant::now();
        let history = ppo::train(&mut envs, &mut trainer, 20, &output, |_, _| Ok(Control::Continue))
            .map_err(|e| format!("{}: {e}", preset.name()))?;
        ensure(history.len() == 20, || format!("{}: {} iterations", preset.name(), history.len()))?;
        let text = std::fs::read_to_string(&csv).map_err(err)?;
        ensure(text.lines().count() == 21, || format!("{}: metrics has {} lines", preset.name(), text.lines().count()))?;
        let last = history.last().unwrap().mean_return;
        ensure(last.is_finite(), || format!("{}: no return logged", preset.name()))?;
        notes.push(format!(
            "{} ({} inputs) final return {last:.2} in {:.0} s",
            preset.name(),
            sim.obs_dim(),
            start.elapsed().as_secs_f64()
        ));
    }
    Ok(notes.join("; "))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rownav"))
        .args(args)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("rownav {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn read(path: PathBuf) -> Result<Vec<u8>, String> {
    std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism(dir: &Path) -> Outcome {
    let mut compared = 0;
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.join(format!("det{i}"))).collect();
    for run in &runs {
        let train = run.join("train");
        cli(&["train", "--preset", "baseline", "--iterations", "3", "--seed", "7", "--out", train.to_str().unwrap()])?;
        let ckpt = train.join("checkpoints").join("final.bin");
        cli(&[
            "eval", "--checkpoint", ckpt.to_str().unwrap(), "--sweep", "standard", "--trials", "2", "--row-length", "5",
            "--out", run.join("eval").to_str().unwrap(),
        ])?;
        cli(&[
            "eval", "--agent", "scripted-zero", "--sweep", "standard", "--trials", "3", "--row-length", "10",
            "--out", run.join("scripted").to_str().unwrap(),
        ])?;
    }
    for file in ["train/metrics.csv", "eval/table.csv", "eval/trials.csv", "scripted/table.csv", "scripted/trials.csv"] {
        let a = read(runs[0].join(file))?;
        let b = read(runs[1].join(file))?;
        ensure(!a.is_empty() && a == b, || format!("{file} differs between runs"))?;
        compared += 1;
    }
    Ok(format!("{compared} metric CSVs byte-identical across repeated train/eval runs"))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "compression identity", limit: Duration::from_secs(1), run: compression },
        Criterion { id: 2, name: "downsampling oracle", limit: Duration::from_secs(30), run: downsampling_oracle },
        Criterion { id: 3, name: "gradient correctness", limit: Duration::from_secs(60), run: gradient_check },
        Criterion { id: 4, name: "GAE oracle", limit: Duration::from_secs(5), run: gae_oracle },
        Criterion { id: 5, name: "reward contract", limit: Duration::from_secs(60), run: reward_contract },
        Criterion { id: 6, name: "closed-form traversal", limit: Duration::from_secs(10), run: closed_form_traversal },
        Criterion { id: 7, name: "training reproduction", limit: Duration::from_secs(2 * 3600), run: training_reproduction },
        Criterion { id: 8, name: "ablation contract", limit: Duration::from_secs(30 * 60), run: ablation_contract },
        Criterion { id: 9, name: "determinism", limit: Duration::from_secs(30 * 60), run: determinism },
    ];
    // libtest flags are ignored; bare numbers select criteria
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let temp = tempfile::tempdir().expect("temporary directory");
    let root = std::env::var_os("ROWNAV_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| temp.path().to_path_buf());
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let dir = root.join(format!("criterion{}", c.id));
        std::fs::create_dir_all(&dir).expect("artifact directory");
        let start = Instant::now();
        let outcome = (c.run)(&dir);
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.limit => Err(format!("{d}; took {elapsed:.1?}, limit {:?}", c.limit)),
            o => o,
        };
        match &outcome {
            Ok(d) => println!("criterion {} ({}): PASS [{elapsed:.1?}] {d}", c.id, c.name),
            Err(d) => {
                failed += 1;
                println!("criterion {} ({}): FAIL [{elapsed:.1?}] {d}", c.id, c.name)
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
