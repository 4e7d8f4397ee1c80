//! Voxel downsampling of a point cloud into a 2D row map.
//!
//! Each point is binned with `psi(p) = (floor(x/dx), floor(y/dy), floor(z/dz))`.
//! Voxels inside the region of interest are flattened by counting the
//! occupied height levels at each `(x, y)` column and dividing by `H`.
//! ROI membership is decided on voxel indices, so a point belongs to the ROI
//! exactly when its voxel does.
//!
//! Text grids put the far edge of the ROI on the first line and the left
//! edge (largest y) in the first column, so a rendering looks like the view
//! from above with the robot at the bottom.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::PointCloud;

pub type Voxel = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelGridSpec {
    /// Voxel edge lengths (dx, dy, dz), meters.
    pub delta: [f64; 3],
    /// Forward extent `[min, max)` in the sensor frame, meters.
    pub roi_x: [f64; 2],
    /// Lateral extent `[min, max)` in the sensor frame, meters.
    pub roi_y: [f64; 2],
    /// Lower edge of the height band in the sensor frame, meters.
    pub z_min: f64,
    /// Number of height levels `H`; the band is `[z_min, z_min + H * dz)`.
    pub height_levels: usize,
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            delta: [0.1, 0.1, 0.1],
            roi_x: [0.0, 3.0],
            roi_y: [-1.5, 1.5],
            z_min: -0.2,
            height_levels: 4,
        }
    }
}

fn multiple_of(value: f64, delta: f64) -> Option<i64> {
    let n = (value / delta).round();
    ((value - n * delta).abs() < 1e-9).then_some(n as i64)
}

/// Integer index ranges of the ROI: `[origin, origin + len)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexBox {
    pub origin: [i64; 3],
    pub dims: [usize; 3],
}

impl IndexBox {
    pub fn contains(&self, v: &Voxel) -> bool {
        (0..3).all(|a| v[a] >= self.origin[a] && v[a] < self.origin[a] + self.dims[a] as i64)
    }
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        self.index_box().map(|_| ())
    }

    pub fn index_box(&self) -> Result<IndexBox> {
        if self.delta.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidConfig("voxel sizes must be > 0".into()));
        }
        if self.height_levels == 0 {
            return Err(Error::InvalidConfig("height_levels must be >= 1".into()));
        }
        let bound = |v: f64, d: f64, what: &str| {
            multiple_of(v, d).ok_or_else(|| {
                Error::InvalidConfig(format!("{what} = {v} is not a multiple of the voxel size {d}"))
            })
        };
        let x0 = bound(self.roi_x[0], self.delta[0], "roi_x min")?;
        let x1 = bound(self.roi_x[1], self.delta[0], "roi_x max")?;
        let y0 = bound(self.roi_y[0], self.delta[1], "roi_y min")?;
        let y1 = bound(self.roi_y[1], self.delta[1], "roi_y max")?;
        let z0 = bound(self.z_min, self.delta[2], "z_min")?;
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidConfig("ROI extents must be non-empty".into()));
        }
        Ok(IndexBox {
            origin: [x0, y0, z0],
            dims: [(x1 - x0) as usize, (y1 - y0) as usize, self.height_levels],
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        let b = self.index_box().expect("validated voxel grid spec");
        (b.dims[0], b.dims[1])
    }

    pub fn cell_count(&self) -> usize {
        let (nx, ny) = self.dims();
        nx * ny
    }

    /// Horizontal distance from the sensor to the farthest ROI corner.
    pub fn horizontal_reach(&self) -> f64 {
        let fx = self.roi_x[0].abs().max(self.roi_x[1].abs());
        let fy = self.roi_y[0].abs().max(self.roi_y[1].abs());
        fx.hypot(fy)
    }

    /// Voxel index of a point.
    #[inline]
    pub fn voxel_of(&self, p: &[f64; 3]) -> Voxel {
        [
            (p[0] / self.delta[0]).floor() as i64,
            (p[1] / self.delta[1]).floor() as i64,
            (p[2] / self.delta[2]).floor() as i64,
        ]
    }
}

/// Flattened occupancy grid, values in `{0, 1/H, ..., 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMap {
    nx: usize,
    ny: usize,
    height_levels: usize,
    /// Occupied level counts, indexed `ix * ny + iy`.
    counts: Vec<u16>,
}

impl RowMap {
    pub fn zeros(nx: usize, ny: usize, height_levels: usize) -> Self {
        Self {
            nx,
            ny,
            height_levels,
            counts: vec![0; nx * ny],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn height_levels(&self) -> usize {
        self.height_levels
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Number of occupied height levels in cell `(ix, iy)`.
    pub fn count(&self, ix: usize, iy: usize) -> usize {
        self.counts[ix * self.ny + iy] as usize
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.count(ix, iy) as f64 / self.height_levels as f64
    }

    /// Cell values in `ix * ny + iy` order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.height_levels as f64;
        self.counts.iter().map(move |&c| c as f64 / h)
    }

    pub fn extend_f32(&self, out: &mut Vec<f32>) {
        let h = self.height_levels as f32;
        out.extend(self.counts.iter().map(|&c| c as f32 / h));
    }

    /// Fraction of cells with any occupancy.
    pub fn occupancy_fraction(&self) -> f64 {
        self.counts.iter().filter(|&&c| c > 0).count() as f64 / self.counts.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.values().sum::<f64>() / self.counts.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.counts.len() * 5);
        for r in 0..self.nx {
            let ix = self.nx - 1 - r;
            for c in 0..self.ny {
                let iy = self.ny - 1 - c;
                if c > 0 {
                    s.push(' ');
                }
                write!(s, "{}", self.get(ix, iy)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parse a text grid; `height_levels` fixes the quantisation.
    pub fn from_text(text: &str, height_levels: usize) -> Result<Self> {
        let mut rows: Vec<Vec<u16>> = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let mut row = Vec::new();
            let mut pos = 0;
            for field in line.split_ascii_whitespace() {
                let at = offset + pos + line[pos..].find(field).unwrap_or(0);
                pos = at - offset + field.len();
                let bad = |message: String| Error::Parse {
                    offset: at,
                    message,
                };
                let v: f64 = field.parse().map_err(|_| bad(format!("invalid number {field:?}")))?;
                let k = v * height_levels as f64;
                if !(0.0..=height_levels as f64).contains(&k) || (k - k.round()).abs() > 1e-9 {
                    return Err(bad(format!("{v} is not a multiple of 1/{height_levels} in [0, 1]")));
                }
                row.push(k.round() as u16);
            }
            if !row.is_empty() {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(Error::Parse {
                            offset,
                            message: format!("expected {} columns, found {}", first.len(), row.len()),
                        });
                    }
                }
                rows.push(row);
            }
            offset += line.len();
        }
        let nx = rows.len();
        let ny = rows.first().map_or(0, Vec::len);
        let mut map = Self::zeros(nx, ny, height_levels);
        for (r, row) in rows.iter().enumerate() {
            for (c, &k) in row.iter().enumerate() {
                map.counts[(nx - 1 - r) * ny + (ny - 1 - c)] = k;
            }
        }
        Ok(map)
    }

    /// Binary portable graymap, each cell drawn as a `scale` x `scale` block.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let (w, h) = (self.ny * scale, self.nx * scale);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for r in 0..h {
            let ix = self.nx - 1 - r / scale;
            for c in 0..w {
                let iy = self.ny - 1 - c / scale;
                out.push((self.get(ix, iy) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn save_pgm(&self, path: &Path, scale: usize) -> Result<()> {
        std::fs::write(path, self.to_pgm(scale)).map_err(|e| Error::file(path, e))
    }
}

/// Voxel set of the points that fall inside the ROI and height band.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelGridSpec) -> BTreeSet<Voxel> {
    let roi = spec.index_box().expect("validated voxel grid spec");
    cloud
        .points
        .iter()
        .map(|p| spec.voxel_of(p))
        .filter(|v| roi.contains(v))
        .collect()
}

/// Mean occupancy over the height levels of each ROI column.
pub fn flatten(voxels: &BTreeSet<Voxel>, spec: &VoxelGridSpec) -> Result<RowMap> {
    let roi = spec.index_box()?;
    let [nx, ny, h] = roi.dims;
    let mut map = RowMap::zeros(nx, ny, h);
    for v in voxels {
        if !roi.contains(v) {
            return Err(Error::VoxelOutsideRoi { voxel: *v });
        }
        let ix = (v[0] - roi.origin[0]) as usize;
        let iy = (v[1] - roi.origin[1]) as usize;
        map.counts[ix * ny + iy] += 1;
    }
    Ok(map)
}

/// Point cloud to row map: crop, voxelize, flatten.
pub fn transform(cloud: &PointCloud, spec: &VoxelGridSpec) -> RowMap {
    let roi = spec.index_box().expect("validated voxel grid spec");
    let [nx, ny, h] = roi.dims;
    let mut occupied = vec![false; nx * ny * h];
    for p in &cloud.points {
        let v = spec.voxel_of(p);
        if roi.contains(&v) {
            let ix = (v[0] - roi.origin[0]) as usize;
            let iy = (v[1] - roi.origin[1]) as usize;
            let iz = (v[2] - roi.origin[2]) as usize;
            occupied[(ix * ny + iy) * h + iz] = true;
        }
    }
    let mut map = RowMap::zeros(nx, ny, h);
    for (cell, levels) in map.counts.iter_mut().zip(occupied.chunks_exact(h)) {
        *cell = levels.iter().filter(|&&o| o).count() as u16;
    }
    map
}
