//! Spinning multi-channel LiDAR simulated by raycasting against plant cylinders.
//!
//! The sensor frame sits at the robot position, `mount_height` above the
//! ground, with x forward, y left and z up. Ray `(c, j)` has elevation
//! `channels[c]` and azimuth `2 * pi * j / azimuth_count` relative to the
//! robot heading. Points are ordered by channel, then azimuth.
//!
//! Range noise is drawn per ray from a stream keyed by `(noise_seed, ray)`,
//! so a ray's noise never depends on which other rays hit something.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::world::{Plant, PlantGrid, PlantationMap};

/// Range noise is truncated at this many standard deviations.
pub const NOISE_TRUNCATION: f64 = 3.0;
/// Hits closer than this along a ray are ignored (self-intersection guard).
const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    /// Elevation angles in degrees, strictly increasing.
    pub channels: Vec<f64>,
    pub azimuth_count: usize,
    pub max_range: f64,
    pub mount_height: f64,
    /// Standard deviation of range noise, meters.
    pub noise_sigma: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        // The middle four rings of a 16-channel, 2-degree-spaced sensor.
        Self {
            channels: vec![-3.0, -1.0, 1.0, 3.0],
            azimuth_count: 1800,
            max_range: 100.0,
            mount_height: 0.4,
            noise_sigma: 0.01,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("lidar needs at least one channel".into()));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "lidar channels must be strictly increasing".into(),
            ));
        }
        if self.channels.iter().any(|c| !c.is_finite() || c.abs() >= 90.0) {
            return Err(Error::InvalidConfig(
                "lidar channel elevations must lie in (-90, 90) degrees".into(),
            ));
        }
        if self.azimuth_count == 0 {
            return Err(Error::InvalidConfig("azimuth_count must be > 0".into()));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::InvalidConfig("max_range must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.mount_height.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise_sigma must be >= 0 and mount_height finite".into(),
            ));
        }
        Ok(())
    }

    /// Number of rays per sweep, the upper bound on points.
    pub fn ray_count(&self) -> usize {
        self.channels.len() * self.azimuth_count
    }

    pub fn azimuth(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / self.azimuth_count as f64
    }

    /// Unit direction of ray `(channel, azimuth)` in the sensor frame.
    pub fn ray_direction(&self, channel: usize, j: usize) -> [f64; 3] {
        let (se, ce) = self.channels[channel].to_radians().sin_cos();
        let (sa, ca) = self.azimuth(j).sin_cos();
        [ce * ca, ce * sa, se]
    }
}

/// One sweep's hit points in the sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Ray index `channel * azimuth_count + azimuth` of each point, when known.
    pub rays: Vec<u32>,
}

impl PointCloud {
    pub fn from_points(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            rays: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whitespace-delimited `x y z`, one point per line.
    pub fn write_xyz<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for p in &self.points {
            writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }

    pub fn to_xyz_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_xyz(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("xyz output is ASCII")
    }

    /// Parse `x y z` rows. Blank lines and `#` comments are skipped.
    pub fn parse_xyz(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.split('#').next().unwrap_or("");
            let mut coords = [0.0; 3];
            let mut count = 0;
            let mut pos = 0;
            for field in body.split_ascii_whitespace() {
                let field_offset = offset + pos + body[pos..].find(field).unwrap_or(0);
                pos = field_offset - offset + field.len();
                if count == 3 {
                    return Err(Error::Parse {
                        offset: field_offset,
                        message: "expected exactly three coordinates per line".into(),
                    });
                }
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    offset: field_offset,
                    message: format!("invalid number {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        offset: field_offset,
                        message: "coordinates must be finite".into(),
                    });
                }
                coords[count] = v;
                count += 1;
            }
            match count {
                0 => {}
                3 => points.push(coords),
                _ => {
                    return Err(Error::Parse {
                        offset,
                        message: format!("expected three coordinates, found {count}"),
                    })
                }
            }
            offset += line.len();
        }
        Ok(Self::from_points(points))
    }

    pub fn save_xyz(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_xyz(std::io::BufWriter::new(file))
            .map_err(|e| Error::file(path, e))
    }

    pub fn load_xyz(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse_xyz(&text)
    }
}

/// Smallest positive ray parameter where the ray meets the lateral surface of
/// the finite cylinder `plant` (caps ignored), if it is within `max_range`.
pub fn ray_cylinder(
    origin: [f64; 3],
    direction: [f64; 3],
    plant: &Plant,
    max_range: f64,
) -> Option<f64> {
    let dx = origin[0] - plant.center.x;
    let dy = origin[1] - plant.center.y;
    let a = direction[0] * direction[0] + direction[1] * direction[1];
    if a < 1e-18 {
        return None;
    }
    let b = dx * direction[0] + dy * direction[1];
    let c = dx * dx + dy * dy - plant.radius * plant.radius;
    let (t0, t1) = circle_roots(a, b, c)?;
    [t0, t1].into_iter().find(|&t| {
        let z = origin[2] + t * direction[2];
        t > MIN_HIT && t <= max_range && (0.0..=plant.height).contains(&z)
    })
}

/// Roots of `a t^2 + 2 b t + c = 0`, ascending.
#[inline]
fn circle_roots(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -(b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return Some((0.0, 0.0));
    }
    let (r0, r1) = (q / a, c / q);
    Some(if r0 <= r1 { (r0, r1) } else { (r1, r0) })
}

/// Restriction of a sweep to rays that can reach a forward window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SweepWindow {
    /// Only azimuths with a non-negative forward component.
    pub forward_only: bool,
    /// Horizontal traversal limit, meters.
    pub horizontal_reach: f64,
}

/// Simulate one full revolution from `pose` over `map`.
pub fn sweep(pose: &Pose2, map: &PlantationMap, cfg: &LidarConfig, noise_seed: u64) -> PointCloud {
    sweep_windowed(pose, map, cfg, noise_seed, None)
}

/// Ray noise seed for ray `k` of a sweep seeded with `noise_seed`.
fn ray_seed(noise_seed: u64, k: usize) -> u64 {
    noise_seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn range_noise(noise_seed: u64, k: usize, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(ray_seed(noise_seed, k));
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= NOISE_TRUNCATION {
            return sigma * z;
        }
    }
}

pub(crate) fn sweep_windowed(
    pose: &Pose2,
    map: &PlantationMap,
    cfg: &LidarConfig,
    noise_seed: u64,
    window: Option<SweepWindow>,
) -> PointCloud {
    let n_ch = cfg.channels.len();
    let mut per_channel: Vec<Vec<([f64; 3], u32)>> = vec![Vec::new(); n_ch];
    if map.plants().is_empty() {
        return PointCloud::default();
    }
    let elev: Vec<(f64, f64)> = cfg
        .channels
        .iter()
        .map(|c| {
            let (s, c) = c.to_radians().sin_cos();
            (s, c)
        })
        .collect();
    let tan_el: Vec<f64> = elev.iter().map(|(s, c)| s / c).collect();
    // horizontal reach of each channel
    let reach: Vec<f64> = elev
        .iter()
        .map(|(_, c)| {
            let r = cfg.max_range * c;
            window.map_or(r, |w| r.min(w.horizontal_reach))
        })
        .collect();
    let max_reach = reach.iter().copied().fold(0.0, f64::max);
    let plants = map.plants();
    let grid = map.grid();
    let h = cfg.mount_height;
    let mut best = vec![f64::INFINITY; n_ch];
    let mut best_plant = vec![0usize; n_ch];

    for j in 0..cfg.azimuth_count {
        let az = cfg.azimuth(j);
        let (sa, ca) = az.sin_cos();
        if window.is_some_and(|w| w.forward_only) && ca < 0.0 {
            continue;
        }
        let (sw, cw) = (pose.theta + az).sin_cos();
        best.iter_mut().for_each(|b| *b = f64::INFINITY);
        traverse(grid, pose.x, pose.y, cw, sw, max_reach, |t_enter, cell| {
            for &pi in cell {
                let plant = &plants[pi as usize];
                let dx = pose.x - plant.center.x;
                let dy = pose.y - plant.center.y;
                let b = dx * cw + dy * sw;
                let c = dx * dx + dy * dy - plant.radius * plant.radius;
                let Some((t0, t1)) = circle_roots(1.0, b, c) else {
                    continue;
                };
                for ch in 0..n_ch {
                    for th in [t0, t1] {
                        if th >= best[ch] {
                            break;
                        }
                        if th * elev[ch].1.recip() <= MIN_HIT || th > reach[ch] {
                            continue;
                        }
                        let z = h + th * tan_el[ch];
                        if (0.0..=plant.height).contains(&z) {
                            best[ch] = th;
                            best_plant[ch] = pi as usize;
                            break;
                        }
                    }
                }
            }
            // keep walking while some channel could still find a nearer hit
            best.iter().any(|&b| b >= t_enter)
        });
        for ch in 0..n_ch {
            if !best[ch].is_finite() {
                continue;
            }
            let k = ch * cfg.azimuth_count + j;
            let t = best[ch] / elev[ch].1 + range_noise(noise_seed, k, cfg.noise_sigma);
            if t <= 0.0 || t > cfg.max_range {
                continue;
            }
            let (se, ce) = elev[ch];
            per_channel[ch].push(([t * ce * ca, t * ce * sa, t * se], k as u32));
        }
    }
    let mut cloud = PointCloud::default();
    for (p, k) in per_channel.into_iter().flatten() {
        cloud.points.push(p);
        cloud.rays.push(k);
    }
    cloud
}

/// Walk grid cells pierced by the 2D ray `o + t d` (unit `d`) for `t` in
/// `[0, t_max]`. `visit(t_enter, plants)` returns whether to continue.
fn traverse(
    grid: &PlantGrid,
    ox: f64,
    oy: f64,
    dx: f64,
    dy: f64,
    t_max: f64,
    mut visit: impl FnMut(f64, &[u32]) -> bool,
) {
    let (cols, rows) = grid.dims();
    if cols == 0 || rows == 0 {
        return;
    }
    let cell = PlantGrid::CELL;
    let org = grid.origin();
    let (gx1, gy1) = (org.x + cols as f64 * cell, org.y + rows as f64 * cell);
    // slab clip against the grid box
    let mut t_lo = 0.0f64;
    let mut t_hi = t_max;
    for (o, d, lo, hi) in [(ox, dx, org.x, gx1), (oy, dy, org.y, gy1)] {
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return;
            }
        } else {
            let (a, b) = ((lo - o) / d, (hi - o) / d);
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_lo > t_hi {
        return;
    }
    let px = ox + dx * t_lo;
    let py = oy + dy * t_lo;
    let (c, r) = grid.cell_of(px, py);
    let mut ci = c.clamp(0, cols as i64 - 1);
    let mut ri = r.clamp(0, rows as i64 - 1);
    let axis = |i: i64, d: f64, o: f64, base: f64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, (base + (i + 1) as f64 * cell - o) / d, cell / d)
        } else if d < 0.0 {
            (-1, (base + i as f64 * cell - o) / d, -cell / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut next_x, delta_x) = axis(ci, dx, ox, org.x);
    let (step_y, mut next_y, delta_y) = axis(ri, dy, oy, org.y);
    let mut t_enter = t_lo;
    loop {
        if !visit(t_enter, grid.cell(ci, ri)) {
            return;
        }
        if next_x < next_y {
            ci += step_x;
            t_enter = next_x;
            next_x += delta_x;
        } else {
            ri += step_y;
            t_enter = next_y;
            next_y += delta_y;
        }
        if t_enter > t_hi || ci < 0 || ri < 0 || ci >= cols as i64 || ri >= rows as i64 {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::world::{generate, RowSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_plant_map(x: f64, y: f64, r: f64) -> PlantationMap {
        let plant = Plant {
            center: Point2::new(x, y),
            radius: r,
            height: 1.5,
        };
        PlantationMap::from_plants(RowSpec::straight(10.0), vec![plant], vec![])
    }

    fn quiet(cfg: LidarConfig) -> LidarConfig {
        LidarConfig {
            noise_sigma: 0.0,
            ..cfg
        }
    }

    #[test]
    fn ray_cylinder_axis_aligned() {
        let plant = Plant {
            center: Point2::new(2.0, 0.0),
            radius: 0.5,
            height: 1.5,
        };
        let t = ray_cylinder([0.0, 0.0, 0.3], [1.0, 0.0, 0.0], &plant, 100.0).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
        assert_eq!(ray_cylinder([0.0, 0.0, 1.6], [1.0, 0.0, 0.0], &plant, 100.0), None);
        assert_eq!(ray_cylinder([0.0, 0.0, 0.3], [1.0, 0.0, 0.0], &plant, 1.0), None);
        assert_eq!(ray_cylinder([0.0, 0.0, 0.3], [-1.0, 0.0, 0.0], &plant, 100.0), None);
        assert_eq!(ray_cylinder([2.0, 0.0, 0.3], [0.0, 0.0, 1.0], &plant, 100.0), None);
    }

    /// Marching oracle: step along the ray and report the first sign change
    /// of `dist^2 - r^2` whose crossing lies inside the height band.
    fn march(origin: [f64; 3], dir: [f64; 3], plant: &Plant, t_from: f64, t_to: f64) -> Option<f64> {
        let step = 1e-4;
        let f = |t: f64| {
            let x = origin[0] + t * dir[0] - plant.center.x;
            let y = origin[1] + t * dir[1] - plant.center.y;
            x * x + y * y - plant.radius * plant.radius
        };
        let mut t = t_from;
        let mut prev = f(t);
        while t < t_to {
            let next_t = t + step;
            let cur = f(next_t);
            if (prev > 0.0) != (cur > 0.0) {
                let tc = 0.5 * (t + next_t);
                let z = origin[2] + tc * dir[2];
                if (0.0..=plant.height).contains(&z) {
                    return Some(tc);
                }
            }
            prev = cur;
            t = next_t;
        }
        None
    }

    #[test]
    fn ray_cylinder_matches_marching_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = 0;
        let mut compared = 0;
        for _ in 0..100_000 {
            let plant = Plant {
                center: Point2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                radius: rng.random_range(0.02..0.3),
                height: rng.random_range(0.5..2.0),
            };
            let origin = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.5..2.5),
            ];
            // aim roughly at the plant so a good share of rays hit
            let target = [
                plant.center.x + rng.random_range(-0.4..0.4),
                plant.center.y + rng.random_range(-0.4..0.4),
                rng.random_range(-0.5..2.5),
            ];
            let mut d = [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if n < 1e-3 {
                continue;
            }
            d.iter_mut().for_each(|v| *v /= n);
            let dh = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if dh < 0.05 {
                continue;
            }
            // Skip near-tangent rays and rays starting on the surface, where a
            // 1e-4 march cannot resolve the crossing.
            let (ox, oy) = (origin[0] - plant.center.x, origin[1] - plant.center.y);
            let cross = (ox * d[1] - oy * d[0]).abs() / dh;
            let start = (ox * ox + oy * oy).sqrt();
            if (cross - plant.radius).abs() < 2e-3 || (start - plant.radius).abs() < 2e-3 {
                continue;
            }
            let max_range = 5.0;
            // window the march around the closest approach to the axis
            let t_mid = -(ox * d[0] + oy * d[1]) / (dh * dh);
            let half = (plant.radius + 0.01) / dh;
            let from = (t_mid - half).max(0.0);
            let to = (t_mid + half).min(max_range);
            let oracle = if from < to { march(origin, d, &plant, from, to) } else { None };
            let analytic = ray_cylinder(origin, d, &plant, max_range);
            compared += 1;
            match (analytic, oracle) {
                (Some(a), Some(o)) => {
                    assert!((a - o).abs() <= 2e-4, "{a} vs {o}");
                    hits += 1;
                }
                (None, None) => {}
                // crossings within one march step of the band edge or range end
                (Some(a), None) | (None, Some(a)) => {
                    let z = origin[2] + a * d[2];
                    let near_edge = z.abs() < 1e-3
                        || (z - plant.height).abs() < 1e-3
                        || (a - max_range).abs() < 1e-3;
                    assert!(near_edge, "disagreement at t={a}, z={z}");
                }
            }
        }
        assert!(compared > 90_000);
        assert!(hits > 10_000, "too few hits: {hits}");
    }

    #[test]
    fn empty_map_gives_empty_cloud() {
        let map = PlantationMap::from_plants(RowSpec::straight(10.0), vec![], vec![]);
        let cloud = sweep(&Pose2::default(), &map, &LidarConfig::default(), 1);
        assert!(cloud.is_empty());
    }

    #[test]
    fn single_cylinder_dead_ahead() {
        let map = single_plant_map(1.0, 0.0, 0.04);
        let cfg = quiet(LidarConfig {
            channels: vec![0.0],
            ..LidarConfig::default()
        });
        let cloud = sweep(&Pose2::default(), &map, &cfg, 0);
        let ahead: Vec<_> = cloud
            .points
            .iter()
            .zip(&cloud.rays)
            .filter(|(_, &k)| k == 0)
            .collect();
        assert_eq!(ahead.len(), 1);
        let p = ahead[0].0;
        assert!((p[0] - 0.96).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn default_sweep_within_ray_budget() {
        let map = generate(&RowSpec::straight(20.0)).unwrap();
        let cfg = LidarConfig::default();
        assert_eq!(cfg.ray_count(), 7200);
        let cloud = sweep(&Pose2::new(2.0, 0.0, 0.0), &map, &cfg, 5);
        assert!(cloud.len() > 0 && cloud.len() <= 7200, "{}", cloud.len());
        for p in &cloud.points {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!(r <= cfg.max_range && p.iter().all(|v| v.is_finite()));
        }
        assert!(cloud.rays.windows(2).all(|w| w[0] < w[1]));
    }

    /// Per-ray brute force over every plant with the public primitive.
    fn brute_force_sweep(pose: &Pose2, map: &PlantationMap, cfg: &LidarConfig) -> Vec<(u32, [f64; 3])> {
        let origin = [pose.x, pose.y, cfg.mount_height];
        let mut out = Vec::new();
        for ch in 0..cfg.channels.len() {
            for j in 0..cfg.azimuth_count {
                let local = cfg.ray_direction(ch, j);
                let (s, c) = pose.theta.sin_cos();
                let world = [c * local[0] - s * local[1], s * local[0] + c * local[1], local[2]];
                let t = map
                    .plants()
                    .iter()
                    .filter_map(|p| ray_cylinder(origin, world, p, cfg.max_range))
                    .fold(f64::INFINITY, f64::min);
                if t.is_finite() {
                    let k = (ch * cfg.azimuth_count + j) as u32;
                    out.push((k, [t * local[0], t * local[1], t * local[2]]));
                }
            }
        }
        out
    }

    #[test]
    fn sweep_matches_brute_force_raycasting() {
        let map = generate(&RowSpec::sinusoidal(1.8, 0.2, 6.0).with_seed(4)).unwrap();
        let cfg = quiet(LidarConfig {
            channels: vec![-15.0, -3.0, 1.0, 20.0],
            azimuth_count: 360,
            max_range: 8.0,
            ..LidarConfig::default()
        });
        for pose in [Pose2::new(0.5, 0.0, 0.1), Pose2::new(3.0, 0.1, -0.4), Pose2::new(-1.0, 0.0, 0.0)] {
            let fast = sweep(&pose, &map, &cfg, 0);
            let slow = brute_force_sweep(&pose, &map, &cfg);
            assert_eq!(fast.len(), slow.len());
            for ((p, k), (k2, q)) in fast.points.iter().zip(&fast.rays).zip(&slow) {
                assert_eq!(k, k2);
                for i in 0..3 {
                    assert!((p[i] - q[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sweep_invariant_under_rigid_motion() {
        let map = generate(&RowSpec::straight(8.0).with_seed(2)).unwrap();
        let cfg = quiet(LidarConfig::default());
        let pose = Pose2::new(1.0, 0.05, 0.1);
        let base = sweep(&pose, &map, &cfg, 0);
        let motion = Pose2::new(-3.0, 7.5, 1.1);
        let moved_plants = |row: &[Plant]| -> Vec<Plant> {
            row.iter()
                .map(|p| Plant {
                    center: motion.to_world(p.center),
                    ..*p
                })
                .collect()
        };
        let moved = PlantationMap::from_plants(
            *map.spec(),
            moved_plants(map.left_plants()),
            moved_plants(map.right_plants()),
        );
        let p = motion.to_world(pose.position());
        let moved_pose = Pose2::new(p.x, p.y, pose.theta + motion.theta);
        let other = sweep(&moved_pose, &moved, &cfg, 0);
        assert_eq!(base.rays, other.rays);
        for (a, b) in base.points.iter().zip(&other.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn points_lie_on_plant_surfaces() {
        let map = generate(&RowSpec::sinusoidal(2.0, 0.2, 10.0).with_seed(8)).unwrap();
        let cfg = LidarConfig::default();
        let pose = Pose2::new(2.0, 0.0, 0.2);
        let cloud = sweep(&pose, &map, &cfg, 99);
        let tol = NOISE_TRUNCATION * cfg.noise_sigma + 1e-6;
        for p in &cloud.points {
            let w = pose.to_world(Point2::new(p[0], p[1]));
            let z = cfg.mount_height + p[2];
            let on_surface = map.plants().iter().any(|pl| {
                let radial = (w.distance(&pl.center) - pl.radius).abs();
                radial <= tol && z >= -tol && z <= pl.height + tol
            });
            assert!(on_surface, "{p:?}");
        }
    }

    #[test]
    fn noise_is_seeded() {
        let map = generate(&RowSpec::straight(10.0)).unwrap();
        let cfg = LidarConfig::default();
        let pose = Pose2::new(1.0, 0.0, 0.0);
        assert_eq!(sweep(&pose, &map, &cfg, 3), sweep(&pose, &map, &cfg, 3));
        assert_ne!(sweep(&pose, &map, &cfg, 3), sweep(&pose, &map, &cfg, 4));
    }

    #[test]
    fn xyz_round_trip_and_errors() {
        let cloud = PointCloud::from_points(vec![[0.1, -2.0, 3.5e-3], [1.0 / 3.0, 0.0, -0.2]]);
        let text = cloud.to_xyz_string();
        assert_eq!(PointCloud::parse_xyz(&text).unwrap().points, cloud.points);
        assert!(PointCloud::parse_xyz("").unwrap().is_empty());
        assert!(PointCloud::parse_xyz("# header\n\n1 2 3\n").unwrap().len() == 1);
        match PointCloud::parse_xyz("1 2 3\n4 x 6\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match PointCloud::parse_xyz("1 2 3\n4 5\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(LidarConfig::default().validate().is_ok());
        let bad = LidarConfig {
            channels: vec![1.0, -1.0],
            ..LidarConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LidarConfig {
            azimuth_count: 0,
            ..LidarConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
