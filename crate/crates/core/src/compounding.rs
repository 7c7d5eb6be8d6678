//! Forward-splatting volume compounding and slice extraction.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::calibration::{pixel_to_probe_unchecked, CalibrationParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::FloatImage;
use crate::io::SweepRecording;

pub const DEFAULT_SPACING_MM: f64 = 0.3;
pub const VOLUME_FILE: &str = "volume.raw";
pub const WEIGHT_FILE: &str = "weight.raw";
pub const HEADER_FILE: &str = "volume.toml";

/// Axis-aligned voxel grid in world coordinates. Voxel `(i, j, k)` sits at
/// `origin + spacing * (i, j, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeGrid {
    pub origin: [f64; 3],
    pub spacing: f64,
    /// Voxel counts along world x, y, z.
    pub dims: [usize; 3],
}

impl VolumeGrid {
    /// Smallest grid covering the box `[lo, hi]`, padded by `pad` voxels.
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, spacing: f64, pad: usize) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Invalid(format!("voxel spacing {spacing} must be > 0")));
        }
        let mut origin = [0.0; 3];
        let mut dims = [0; 3];
        for a in 0..3 {
            if !(lo[a].is_finite() && hi[a].is_finite()) || hi[a] < lo[a] {
                return Err(Error::Invalid("degenerate compounding extent".into()));
            }
            let i0 = (lo[a] / spacing).floor() as i64 - pad as i64;
            let i1 = (hi[a] / spacing).ceil() as i64 + pad as i64;
            origin[a] = i0 as f64 * spacing;
            dims[a] = (i1 - i0 + 1) as usize;
        }
        Ok(Self { origin, spacing, dims })
    }

    /// Grid fitted to the projected extent of all unmasked pixels.
    pub fn fit(recs: &[&SweepRecording], spacing: f64) -> Result<Self> {
        let (lo, hi) = extent_of(recs)?;
        let grid = Self::covering(lo, hi, spacing, 0)?;
        if grid.dims[0] < 2 && grid.dims[2] < 2 {
            return Err(Error::Invalid("sweep has zero extent".into()));
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Storage index; y is the slowest axis so y-slabs are contiguous.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (j * self.dims[2] + k) * self.dims[0] + i
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn to_voxel(&self, p: &Vector3<f64>) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing,
            (p.y - self.origin[1]) / self.spacing,
            (p.z - self.origin[2]) / self.spacing,
        ]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + self.spacing * i as f64,
            self.origin[1] + self.spacing * j as f64,
            self.origin[2] + self.spacing * k as f64,
        )
    }
}

/// World bounding box of all frame corners.
pub fn extent_of(recs: &[&SweepRecording]) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut n = 0;
    for rec in recs {
        let cal = rec.calibration();
        let (w, h) = (cal.lateral_px as f64 - 1.0, cal.axial_px as f64 - 1.0);
        for f in &rec.frames {
            for (x, y) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
                let p = f.pose.transform_point(&pixel_to_probe_unchecked(x, y, cal));
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no frames to compound".into()));
    }
    Ok((lo, hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    /// Weighted mean intensity; 0 where `weight == 0`.
    pub intensity: Vec<f64>,
    pub weight: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed world y: the image plane of a sweep along y.
    Axial,
    /// Fixed world z (depth).
    Coronal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub image: FloatImage,
    pub valid: Vec<bool>,
    /// World mm per pixel along both image axes.
    pub spacing: f64,
}

/// Frame geometry reduced to an affine pixel→world map.
struct FramePlane<'a> {
    base: Vector3<f64>,
    ex: Vector3<f64>,
    ey: Vector3<f64>,
    pixels: &'a [u8],
    valid: Option<Vec<bool>>,
    y_range: (f64, f64),
}

/// Compounds a recording on a grid fitted to its own extent.
pub fn compound(rec: &SweepRecording, spacing: f64, exec: Exec) -> Result<Volume> {
    let grid = VolumeGrid::fit(&[rec], spacing)?;
    compound_with_grid(rec, &grid, exec)
}

/// Splats every unmasked pixel into `grid` with trilinear weights.
/// Pixels projecting outside the grid are dropped (logged).
pub fn compound_with_grid(rec: &SweepRecording, grid: &VolumeGrid, exec: Exec) -> Result<Volume> {
    if rec.frames.len() < 2 {
        return Err(Error::Invalid(format!("compounding needs >= 2 frames, got {}", rec.frames.len())));
    }
    for f in &rec.frames {
        f.pose.validate()?;
    }
    let cal = rec.calibration();
    let (w, h) = (cal.lateral_px as usize, cal.axial_px as usize);
    let planes: Vec<FramePlane> = rec.frames.iter().map(|f| frame_plane(f, cal, grid)).collect();

    let slab = grid.dims[0] * grid.dims[2];
    let mut acc = vec![(0.0f64, 0.0f64); grid.len()];
    exec.for_each_row(&mut acc, slab, |j, row| {
        let jf = j as f64;
        for fp in &planes {
            if fp.y_range.1 < jf - 1.0 || fp.y_range.0 > jf + 1.0 {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if fp.valid.as_ref().is_some_and(|m| !m[i]) {
                        continue;
                    }
                    let v = fp.base + fp.ex * x as f64 + fp.ey * y as f64;
                    splat_into_slab(grid, row, j, [v.x, v.y, v.z], fp.pixels[i] as f64);
                }
            }
        }
    });

    let mut dropped = 0usize;
    let mut total = 0usize;
    for fp in &planes {
        for y in 0..h {
            for x in 0..w {
                if fp.valid.as_ref().is_some_and(|m| !m[y * w + x]) {
                    continue;
                }
                total += 1;
                let v = fp.base + fp.ex * x as f64 + fp.ey * y as f64;
                if !inside(grid, [v.x, v.y, v.z]) {
                    dropped += 1;
                }
            }
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} of {total} pixels fell outside the volume grid");
    }

    let mut intensity = Vec::with_capacity(acc.len());
    let mut weight = Vec::with_capacity(acc.len());
    for (s, wt) in acc {
        intensity.push(if wt > 0.0 { s / wt } else { 0.0 });
        weight.push(wt);
    }
    Ok(Volume { grid: *grid, intensity, weight })
}

fn frame_plane<'a>(f: &'a crate::io::Frame, cal: &CalibrationParams, grid: &VolumeGrid) -> FramePlane<'a> {
    let to = |x: f64, y: f64| {
        let p = f.pose.transform_point(&pixel_to_probe_unchecked(x, y, cal));
        let v = grid.to_voxel(&p);
        Vector3::new(v[0], v[1], v[2])
    };
    let base = to(0.0, 0.0);
    let ex = to(1.0, 0.0) - base;
    let ey = to(0.0, 1.0) - base;
    let (w, h) = (cal.lateral_px as f64 - 1.0, cal.axial_px as f64 - 1.0);
    let ys = [base.y, to(w, 0.0).y, to(0.0, h).y, to(w, h).y];
    let y_range = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    FramePlane { base, ex, ey, pixels: f.image.as_raw(), valid: f.valid_mask(), y_range }
}

#[inline]
fn inside(grid: &VolumeGrid, v: [f64; 3]) -> bool {
    (0..3).all(|a| v[a] >= -1e-9 && v[a] <= (grid.dims[a] - 1) as f64 + 1e-9)
}

/// Adds the part of a trilinear splat that lands in y-plane `j`.
#[inline]
fn splat_into_slab(grid: &VolumeGrid, row: &mut [(f64, f64)], j: usize, v: [f64; 3], value: f64) {
    if !inside(grid, v) {
        return;
    }
    let [nx, ny, nz] = grid.dims;
    let corner = |c: f64, n: usize| -> (usize, f64) {
        let c = c.clamp(0.0, (n - 1) as f64);
        let i0 = (c.floor() as usize).min(n.saturating_sub(2));
        (i0, c - i0 as f64)
    };
    let (j0, fy) = corner(v[1], ny);
    let wy = if j == j0 {
        1.0 - fy
    } else if j == j0 + 1 {
        fy
    } else {
        return;
    };
    if wy == 0.0 && ny > 1 {
        return;
    }
    let (i0, fx) = corner(v[0], nx);
    let (k0, fz) = corner(v[2], nz);
    for (dk, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 || k0 + dk >= nz {
            continue;
        }
        for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 || i0 + di >= nx {
                continue;
            }
            let wt = wx * wy * wz;
            let cell = &mut row[(k0 + dk) * nx + i0 + di];
            cell.0 += wt * value;
            cell.1 += wt;
        }
    }
}

impl Volume {
    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    pub fn slice_count(&self, plane: Plane) -> usize {
        match plane {
            Plane::Axial => self.grid.dims[1],
            Plane::Coronal => self.grid.dims[2],
        }
    }

    /// Nearest-plane slice. Axial slices are x (columns) by z (rows);
    /// coronal slices are x by y.
    pub fn extract_slice(&self, plane: Plane, index: usize) -> Result<Slice> {
        let [nx, ny, nz] = self.grid.dims;
        let n = self.slice_count(plane);
        if index >= n {
            return Err(Error::Domain(format!("slice {index} out of range 0..{n}")));
        }
        let rows = match plane {
            Plane::Axial => nz,
            Plane::Coronal => ny,
        };
        let mut image = FloatImage::new(nx, rows);
        let mut valid = vec![false; nx * rows];
        for r in 0..rows {
            for i in 0..nx {
                let idx = match plane {
                    Plane::Axial => self.grid.index(i, index, r),
                    Plane::Coronal => self.grid.index(i, r, index),
                };
                image.data[r * nx + i] = self.intensity[idx] as f32;
                valid[r * nx + i] = self.weight[idx] > 0.0;
            }
        }
        Ok(Slice { image, valid, spacing: self.grid.spacing })
    }

    /// Slice index nearest to a world coordinate (y for axial, z for coronal).
    pub fn slice_index_at(&self, plane: Plane, world: f64) -> Result<usize> {
        let a = match plane {
            Plane::Axial => 1,
            Plane::Coronal => 2,
        };
        let v = ((world - self.grid.origin[a]) / self.grid.spacing).round();
        if v < 0.0 || v >= self.slice_count(plane) as f64 {
            return Err(Error::Domain(format!("coordinate {world} mm outside the volume")));
        }
        Ok(v as usize)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = toml::to_string(&self.grid).map_err(|e| Error::Invalid(e.to_string()))?;
        let hp = dir.join(HEADER_FILE);
        fs::write(&hp, header).map_err(|e| Error::io(&hp, e))?;
        for (name, data) in [(VOLUME_FILE, &self.intensity), (WEIGHT_FILE, &self.weight)] {
            let bytes: Vec<u8> = data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads a volume written by [`Volume::write`]; values come back at f32 precision.
    pub fn read(dir: &Path) -> Result<Self> {
        let hp = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let grid: VolumeGrid = toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", hp.display())))?;
        let load = |name: &str| -> Result<Vec<f64>> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if bytes.len() != grid.len() * 4 {
                return Err(Error::Invalid(format!("{} has {} bytes, expected {}", p.display(), bytes.len(), grid.len() * 4)));
            }
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
        };
        Ok(Self { grid, intensity: load(VOLUME_FILE)?, weight: load(WEIGHT_FILE)? })
    }
}
