//! Procedural plantation corridors.
//!
//! A corridor is two rows of vertical plant cylinders on either side of a
//! centerline `y(x) = A * sin(2 * pi * f * x / Lref)`. The straight pattern
//! is the same curve with zero amplitude. Row length is measured along the
//! centerline, so a 100 m sinusoidal row is 100 m of travel.
//!
//! Plants are placed at fixed arc-length stations `s_i = i * spacing`,
//! offset along the centerline normal by `+W/2` (left row) and `-W/2`
//! (right row), with truncated Gaussian jitter on offset and radius.
//!
//! # Map file format (version 1)
//!
//! JSON object with keys in this order:
//! `format` (`"rownav-map"`), `version` (`1`), `spec` (the [`RowSpec`],
//! fields in declaration order), `left_plants`, `right_plants` (arrays of
//! `{center: {x, y}, radius, height}` sorted by station). Floats are written
//! in shortest round-trip form, so load(save(map)) is bit-exact.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2};

pub const MAP_FORMAT: &str = "rownav-map";
pub const MAP_VERSION: u32 = 1;

/// Arc-length table resolution for curved rows, meters.
const ARC_TABLE_STEP: f64 = 1e-3;
/// Spatial hash cell edge, meters.
const GRID_CELL: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowPattern {
    Straight,
    Sinusoidal,
}

/// Geometry of individual plants and their placement along a row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantModel {
    pub radius: f64,
    pub height: f64,
    /// Arc-length distance between neighbouring plants in a row.
    pub spacing: f64,
    /// Standard deviation of the lateral offset jitter.
    pub lateral_jitter: f64,
    /// Standard deviation of the radius jitter.
    pub radius_jitter: f64,
}

impl Default for PlantModel {
    fn default() -> Self {
        Self {
            radius: 0.04,
            height: 1.5,
            spacing: 0.2,
            lateral_jitter: 0.03,
            radius_jitter: 0.01,
        }
    }
}

impl PlantModel {
    /// Jitter is truncated at this many standard deviations.
    pub const TRUNCATION: f64 = 3.0;

    pub fn without_jitter(self) -> Self {
        Self {
            lateral_jitter: 0.0,
            radius_jitter: 0.0,
            ..self
        }
    }

    pub fn max_radius(&self) -> f64 {
        self.radius + Self::TRUNCATION * self.radius_jitter
    }
}

/// Parameters of one plantation corridor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RowSpec {
    pub pattern: RowPattern,
    /// Dimensionless curve frequency ("Hz" in the row-generation literature).
    pub frequency: f64,
    /// Peak lateral excursion of the centerline, meters.
    pub amplitude: f64,
    /// Row length measured along the centerline, meters.
    pub row_length: f64,
    /// Distance between the two plant rows, meters.
    pub row_spacing: f64,
    /// Length over which `frequency` full periods occur, meters.
    pub reference_length: f64,
    pub seed: u64,
    pub plant: PlantModel,
}

impl Default for RowSpec {
    fn default() -> Self {
        Self {
            pattern: RowPattern::Sinusoidal,
            frequency: 1.8,
            amplitude: 0.20,
            row_length: 10.0,
            row_spacing: 0.76,
            reference_length: 10.0,
            seed: 0,
            plant: PlantModel::default(),
        }
    }
}

impl RowSpec {
    pub fn straight(row_length: f64) -> Self {
        Self {
            pattern: RowPattern::Straight,
            frequency: 0.0,
            amplitude: 0.0,
            row_length,
            ..Self::default()
        }
    }

    pub fn sinusoidal(frequency: f64, amplitude: f64, row_length: f64) -> Self {
        Self {
            pattern: RowPattern::Sinusoidal,
            frequency,
            amplitude,
            row_length,
            ..Self::default()
        }
    }

    /// The corridor described by a (frequency, amplitude) pair; `(0, 0)` is straight.
    pub fn from_curve(frequency: f64, amplitude: f64, row_length: f64) -> Self {
        if amplitude == 0.0 || frequency == 0.0 {
            Self::straight(row_length)
        } else {
            Self::sinusoidal(frequency, amplitude, row_length)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.frequency,
            self.amplitude,
            self.row_length,
            self.row_spacing,
            self.reference_length,
            self.plant.radius,
            self.plant.height,
            self.plant.spacing,
            self.plant.lateral_jitter,
            self.plant.radius_jitter,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("row spec contains non-finite values".into()));
        }
        let checks = [
            (self.amplitude >= 0.0, "amplitude must be >= 0"),
            (self.frequency >= 0.0, "frequency must be >= 0"),
            (self.row_length > 0.0, "row_length must be > 0"),
            (self.row_spacing > 0.0, "row_spacing must be > 0"),
            (self.reference_length > 0.0, "reference_length must be > 0"),
            (self.plant.height > 0.0, "plant height must be > 0"),
            (self.plant.spacing > 0.0, "plant spacing must be > 0"),
            (self.plant.lateral_jitter >= 0.0, "lateral jitter must be >= 0"),
            (self.plant.radius_jitter >= 0.0, "radius jitter must be >= 0"),
            (
                self.plant.radius - PlantModel::TRUNCATION * self.plant.radius_jitter > 0.0,
                "plant radius must stay positive under jitter",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::InvalidConfig((*msg).into()));
        }
        let max_radius = self.plant.max_radius();
        if self.row_spacing <= 2.0 * max_radius {
            return Err(Error::SealedCorridor {
                row_spacing: self.row_spacing,
                max_radius,
            });
        }
        Ok(())
    }

    fn effective_amplitude(&self) -> f64 {
        match self.pattern {
            RowPattern::Straight => 0.0,
            RowPattern::Sinusoidal => self.amplitude,
        }
    }

    fn wavenumber(&self) -> f64 {
        2.0 * PI * self.frequency / self.reference_length
    }

    pub fn is_straight(&self) -> bool {
        self.effective_amplitude() == 0.0 || self.frequency == 0.0
    }
}

/// Lateral position of the row centerline at `x`.
pub fn centerline_y(x: f64, spec: &RowSpec) -> f64 {
    let a = spec.effective_amplitude();
    if a == 0.0 {
        return 0.0;
    }
    a * (spec.wavenumber() * x).sin()
}

/// dy/dx of the centerline at `x`.
pub fn centerline_slope(x: f64, spec: &RowSpec) -> f64 {
    let a = spec.effective_amplitude();
    if a == 0.0 {
        return 0.0;
    }
    let k = spec.wavenumber();
    a * k * (k * x).cos()
}

/// Arc-length parametrisation of the centerline.
#[derive(Debug, Clone)]
pub struct Centerline {
    spec: RowSpec,
    /// Cumulative arc length at `x = i * ARC_TABLE_STEP`; empty for straight rows.
    arc: Vec<f64>,
    x_end: f64,
}

impl Centerline {
    pub fn new(spec: &RowSpec) -> Self {
        if spec.is_straight() {
            return Self {
                spec: *spec,
                arc: Vec::new(),
                x_end: spec.row_length,
            };
        }
        let h = ARC_TABLE_STEP;
        let speed = |x: f64| centerline_slope(x, spec).hypot(1.0);
        let mut arc = vec![0.0];
        let mut s = 0.0;
        let mut i = 0usize;
        while s < spec.row_length {
            let x0 = i as f64 * h;
            let x1 = (i + 1) as f64 * h;
            // Simpson on each table cell.
            s += h / 6.0 * (speed(x0) + 4.0 * speed(0.5 * (x0 + x1)) + speed(x1));
            arc.push(s);
            i += 1;
        }
        let mut line = Self {
            spec: *spec,
            arc,
            x_end: 0.0,
        };
        line.x_end = line.x_at(spec.row_length);
        line
    }

    /// Total arc length (the row length).
    pub fn length(&self) -> f64 {
        self.spec.row_length
    }

    /// Largest x covered by the row.
    pub fn x_end(&self) -> f64 {
        self.x_end
    }

    pub fn y(&self, x: f64) -> f64 {
        centerline_y(x, &self.spec)
    }

    /// Arc length from the row start to the centerline point at `x`.
    pub fn arc_length_at(&self, x: f64) -> f64 {
        if self.arc.is_empty() {
            return x;
        }
        let pos = (x / ARC_TABLE_STEP).max(0.0);
        let i = (pos.floor() as usize).min(self.arc.len() - 2);
        let frac = pos - i as f64;
        self.arc[i] + frac * (self.arc[i + 1] - self.arc[i])
    }

    /// Inverse of [`Centerline::arc_length_at`].
    pub fn x_at(&self, s: f64) -> f64 {
        if self.arc.is_empty() {
            return s;
        }
        let i = self.arc.partition_point(|&a| a <= s).clamp(1, self.arc.len() - 1) - 1;
        let seg = self.arc[i + 1] - self.arc[i];
        (i as f64 + (s - self.arc[i]) / seg) * ARC_TABLE_STEP
    }

    /// Centerline point and unit left normal at arc length `s`.
    pub fn frame_at(&self, s: f64) -> (Point2, Point2) {
        let x = self.x_at(s);
        let slope = centerline_slope(x, &self.spec);
        let norm = slope.hypot(1.0);
        (
            Point2::new(x, self.y(x)),
            Point2::new(-slope / norm, 1.0 / norm),
        )
    }

    /// x of the centerline point closest to `p`.
    pub fn closest_x(&self, p: Point2) -> f64 {
        let x_end = self.x_end;
        if self.arc.is_empty() {
            return p.x.clamp(0.0, x_end);
        }
        let dist2 = |x: f64| {
            let dy = p.y - self.y(x);
            let dx = p.x - x;
            dx * dx + dy * dy
        };
        let xc = p.x.clamp(0.0, x_end);
        let reach = dist2(xc).sqrt();
        let lo = (p.x - reach).max(0.0);
        let hi = (p.x + reach).min(x_end);
        if hi <= lo {
            return xc;
        }
        const SAMPLES: usize = 64;
        let step = (hi - lo) / SAMPLES as f64;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..=SAMPLES {
            let d = dist2(lo + i as f64 * step);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let mut a = (lo + (best as f64 - 1.0) * step).max(lo);
        let mut b = (lo + (best as f64 + 1.0) * step).min(hi);
        // golden-section refinement
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (dist2(c), dist2(d));
        while b - a > 1e-9 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = dist2(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = dist2(d);
            }
        }
        0.5 * (a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub center: Point2,
    pub radius: f64,
    pub height: f64,
}

/// Rectangular robot footprint centred on the robot position, x forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self {
            length: 0.5,
            width: 0.35,
        }
    }
}

impl Footprint {
    pub fn half_diagonal(&self) -> f64 {
        (0.5 * self.length).hypot(0.5 * self.width)
    }

    /// Exact rectangle/disc overlap test; touching counts as contact.
    pub fn intersects(&self, pose: &Pose2, plant: &Plant) -> bool {
        let local = pose.to_local(plant.center);
        let dx = (local.x.abs() - 0.5 * self.length).max(0.0);
        let dy = (local.y.abs() - 0.5 * self.width).max(0.0);
        dx * dx + dy * dy <= plant.radius * plant.radius
    }
}

/// Uniform-grid index over plant discs. A plant is registered in every cell
/// its bounding square overlaps.
#[derive(Debug, Clone, Default)]
pub struct PlantGrid {
    origin: Point2,
    cols: usize,
    rows: usize,
    /// CSR layout: plants of cell `c` are `indices[offsets[c]..offsets[c + 1]]`.
    offsets: Vec<u32>,
    indices: Vec<u32>,
}

impl PlantGrid {
    pub const CELL: f64 = GRID_CELL;

    fn build(plants: &[Plant]) -> Self {
        if plants.is_empty() {
            return Self::default();
        }
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in plants {
            min_x = min_x.min(p.center.x - p.radius);
            min_y = min_y.min(p.center.y - p.radius);
            max_x = max_x.max(p.center.x + p.radius);
            max_y = max_y.max(p.center.y + p.radius);
        }
        let origin = Point2::new(min_x - GRID_CELL, min_y - GRID_CELL);
        let cols = ((max_x - origin.x) / GRID_CELL).floor() as usize + 2;
        let rows = ((max_y - origin.y) / GRID_CELL).floor() as usize + 2;
        let mut grid = Self {
            origin,
            cols,
            rows,
            offsets: Vec::new(),
            indices: Vec::new(),
        };
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); cols * rows];
        for (i, p) in plants.iter().enumerate() {
            let (c0, r0) = grid.cell_of(p.center.x - p.radius, p.center.y - p.radius);
            let (c1, r1) = grid.cell_of(p.center.x + p.radius, p.center.y + p.radius);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    buckets[r as usize * cols + c as usize].push(i as u32);
                }
            }
        }
        grid.offsets.reserve(buckets.len() + 1);
        grid.offsets.push(0);
        for b in &buckets {
            grid.indices.extend_from_slice(b);
            grid.offsets.push(grid.indices.len() as u32);
        }
        grid
    }

    /// Integer cell coordinates of a point; may lie outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.origin.x) / GRID_CELL).floor() as i64,
            ((y - self.origin.y) / GRID_CELL).floor() as i64,
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    /// Plant indices registered in cell `(col, row)`; empty outside the grid.
    pub fn cell(&self, col: i64, row: i64) -> &[u32] {
        if col < 0 || row < 0 || col as usize >= self.cols || row as usize >= self.rows {
            return &[];
        }
        let c = row as usize * self.cols + col as usize;
        &self.indices[self.offsets[c] as usize..self.offsets[c + 1] as usize]
    }
}

/// One generated corridor. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PlantationMap {
    spec: RowSpec,
    left_plants: Vec<Plant>,
    right_plants: Vec<Plant>,
    /// `left_plants` followed by `right_plants`; indexed by the grid.
    plants: Vec<Plant>,
    centerline: Centerline,
    grid: PlantGrid,
}

impl PartialEq for PlantationMap {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.left_plants == other.left_plants
            && self.right_plants == other.right_plants
    }
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    format: String,
    version: u32,
    spec: RowSpec,
    left_plants: Vec<Plant>,
    right_plants: Vec<Plant>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= PlantModel::TRUNCATION {
            return sigma * z;
        }
    }
}

/// Generate the corridor described by `spec`. Pure in `(spec, spec.seed)`.
pub fn generate(spec: &RowSpec) -> Result<PlantationMap> {
    spec.validate()?;
    let centerline = Centerline::new(spec);
    let model = spec.plant;
    let stations = (spec.row_length / model.spacing + 1e-9).floor() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = 0.5 * spec.row_spacing;
    let mut left = Vec::with_capacity(stations);
    let mut right = Vec::with_capacity(stations);
    for i in 0..stations {
        let s = (i as f64 * model.spacing).min(spec.row_length);
        let (c, n) = centerline.frame_at(s);
        let mut place = |sign: f64| {
            let offset = sign * (half + truncated_normal(&mut rng, model.lateral_jitter));
            let radius = model.radius + truncated_normal(&mut rng, model.radius_jitter);
            Plant {
                center: Point2::new(c.x + offset * n.x, c.y + offset * n.y),
                radius,
                height: model.height,
            }
        };
        left.push(place(1.0));
        right.push(place(-1.0));
    }
    Ok(PlantationMap::assemble(*spec, left, right, centerline))
}

impl PlantationMap {
    fn assemble(
        spec: RowSpec,
        left_plants: Vec<Plant>,
        right_plants: Vec<Plant>,
        centerline: Centerline,
    ) -> Self {
        let plants: Vec<Plant> = left_plants.iter().chain(&right_plants).copied().collect();
        let grid = PlantGrid::build(&plants);
        Self {
            spec,
            left_plants,
            right_plants,
            plants,
            centerline,
            grid,
        }
    }

    /// Build a map from explicit plant lists (tests, hand-made scenes).
    pub fn from_plants(spec: RowSpec, left_plants: Vec<Plant>, right_plants: Vec<Plant>) -> Self {
        let centerline = Centerline::new(&spec);
        Self::assemble(spec, left_plants, right_plants, centerline)
    }

    pub fn spec(&self) -> &RowSpec {
        &self.spec
    }

    pub fn left_plants(&self) -> &[Plant] {
        &self.left_plants
    }

    pub fn right_plants(&self) -> &[Plant] {
        &self.right_plants
    }

    /// All plants, left row first.
    pub fn plants(&self) -> &[Plant] {
        &self.plants
    }

    pub fn centerline(&self) -> &Centerline {
        &self.centerline
    }

    pub fn grid(&self) -> &PlantGrid {
        &self.grid
    }

    pub fn row_length(&self) -> f64 {
        self.spec.row_length
    }

    pub fn max_plant_radius(&self) -> f64 {
        self.plants.iter().map(|p| p.radius).fold(0.0, f64::max)
    }

    /// Indices of plants whose centres may lie within `radius` of `p`.
    pub fn plants_near(&self, p: Point2, radius: f64) -> impl Iterator<Item = usize> + '_ {
        let reach = radius + self.max_plant_radius();
        let (c0, r0) = self.grid.cell_of(p.x - reach, p.y - reach);
        let (c1, r1) = self.grid.cell_of(p.x + reach, p.y + reach);
        (r0..=r1).flat_map(move |r| {
            (c0..=c1).flat_map(move |c| self.grid.cell(c, r).iter().map(|&i| i as usize))
        })
    }

    /// Whether the footprint at `pose` overlaps any plant disc.
    pub fn collides(&self, pose: &Pose2, footprint: &Footprint) -> bool {
        self.plants_near(pose.position(), footprint.half_diagonal())
            .any(|i| footprint.intersects(pose, &self.plants[i]))
    }

    /// Exhaustive version of [`PlantationMap::collides`].
    pub fn collides_exhaustive(&self, pose: &Pose2, footprint: &Footprint) -> bool {
        self.plants.iter().any(|p| footprint.intersects(pose, p))
    }

    /// Arc length of the centerline point closest to `position`, in `[0, L]`.
    pub fn progress(&self, position: Point2) -> f64 {
        let x = self.centerline.closest_x(position);
        self.centerline
            .arc_length_at(x)
            .clamp(0.0, self.spec.row_length)
    }

    /// Signed lateral offset of `plant` from the centerline (left positive).
    pub fn lateral_offset(&self, plant: &Plant) -> f64 {
        let x = self.centerline.closest_x(plant.center);
        let s = self.centerline.arc_length_at(x);
        let (c, n) = self.centerline.frame_at(s);
        (plant.center.x - c.x) * n.x + (plant.center.y - c.y) * n.y
    }

    /// Reflection about the x axis: left and right rows swap sides.
    /// Only meaningful for straight corridors, whose centerline is the x axis.
    pub fn mirrored(&self) -> Self {
        let flip = |p: &Plant| Plant {
            center: Point2::new(p.center.x, -p.center.y),
            ..*p
        };
        let left = self.right_plants.iter().map(flip).collect();
        let right = self.left_plants.iter().map(flip).collect();
        Self::from_plants(self.spec, left, right)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MapFile {
            format: MAP_FORMAT.to_string(),
            version: MAP_VERSION,
            spec: self.spec,
            left_plants: self.left_plants.clone(),
            right_plants: self.right_plants.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: line_col_to_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        if file.format != MAP_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "not a map file (format {:?})",
                file.format
            )));
        }
        if file.version != MAP_VERSION {
            return Err(Error::Version {
                kind: "map",
                found: file.version,
                expected: MAP_VERSION,
            });
        }
        file.spec.validate()?;
        Ok(Self::from_plants(file.spec, file.left_plants, file.right_plants))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

/// Byte offset of a 1-based (line, column) position.
pub(crate) fn line_col_to_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}
