//! Vessel segmentation and the dice / centroid / area comparisons.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationParams;
use crate::compounding::{Plane, Volume};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::FloatImage;
use crate::io::SweepRecording;
use crate::stiffness::mean_sd;

pub const DEFAULT_SAMPLED_FRAMES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    /// Gaussian pre-smoothing, pixels.
    pub blur_sigma_px: f64,
    /// Largest accepted ratio of lumen to tissue mean intensity.
    pub max_contrast_ratio: f64,
    pub min_area_px: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self { blur_sigma_px: 2.5, max_contrast_ratio: 0.5, min_area_px: 20 }
    }
}

impl SegmentParams {
    /// Parameters for volume slices, whose voxels already average speckle.
    pub fn for_volume() -> Self {
        Self { blur_sigma_px: 1.0, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VesselMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    /// Otsu threshold on the smoothed image.
    pub threshold: f64,
    pub source: Option<usize>,
}

impl VesselMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, mask: vec![false; width * height], threshold: f64::NAN, source: None }
    }

    pub fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), width * height);
        Self { width, height, mask, threshold: f64::NAN, source: None }
    }

    pub fn area_px(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area_px() == 0
    }

    /// Pixel centroid `(x, y)`, `None` when empty.
    pub fn centroid_px(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            sx += (i % self.width) as f64;
            sy += (i / self.width) as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Mask-aware Gaussian smoothing: invalid pixels do not bleed into valid ones.
fn masked_blur(img: &FloatImage, valid: Option<&[bool]>, sigma: f64) -> FloatImage {
    let Some(valid) = valid else {
        return img.gaussian_blur(sigma);
    };
    let (w, h) = img.dims();
    let weights = FloatImage { width: w, height: h, data: valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect() };
    let masked = FloatImage { width: w, height: h, data: img.data.iter().zip(valid).map(|(&p, &v)| if v { p } else { 0.0 }).collect() };
    let (num, den) = (masked.gaussian_blur(sigma), weights.gaussian_blur(sigma));
    FloatImage {
        width: w,
        height: h,
        data: num.data.iter().zip(&den.data).map(|(&n, &d)| if d > 1e-3 { n / d } else { 0.0 }).collect(),
    }
}

/// Otsu threshold over a 256-bin histogram of values clamped to [0, 255].
pub fn otsu_threshold(values: impl Iterator<Item = f32>) -> Option<f64> {
    let mut hist = [0u64; 256];
    let mut n = 0u64;
    for v in values {
        hist[(v.clamp(0.0, 255.0) as usize).min(255)] += 1;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        s0 += t as f64 * c as f64;
        let w1 = n as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (s0 / w0, (total - s0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // Pixels in bins 0..=best_t form the dark class.
    (best >= 0.0).then_some(best_t as f64 + 1.0)
}

fn largest_component(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![0u32; w * h];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

/// Fills background regions not 4-connected to the image border.
fn fill_holes(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h)
        .filter(|&i| {
            let (x, y) = (i % w, i / w);
            (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !mask[i]
        })
        .collect();
    for &i in &stack {
        outside[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Dark-lumen segmentation: smoothing, Otsu, largest component, hole fill.
pub fn segment_vessel(img: &FloatImage, valid: Option<&[bool]>, params: &SegmentParams) -> Result<VesselMask> {
    let (w, h) = img.dims();
    if let Some(v) = valid {
        if v.len() != w * h {
            return Err(Error::Invalid("valid mask does not match image".into()));
        }
    }
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let smooth = masked_blur(img, valid, params.blur_sigma_px);
    let t = otsu_threshold((0..w * h).filter(|&i| is_valid(i)).map(|i| smooth.data[i])).ok_or_else(|| Error::NoVessel("no valid pixels".into()))?;
    let dark: Vec<bool> = (0..w * h).map(|i| is_valid(i) && (smooth.data[i] as f64) < t).collect();
    let (mut s_dark, mut n_dark, mut s_bright, mut n_bright) = (0.0, 0usize, 0.0, 0usize);
    for i in (0..w * h).filter(|&i| is_valid(i)) {
        if dark[i] {
            s_dark += smooth.data[i] as f64;
            n_dark += 1;
        } else {
            s_bright += smooth.data[i] as f64;
            n_bright += 1;
        }
    }
    log::debug!("contrast ratio {}", (s_dark / n_dark as f64) / (s_bright / n_bright as f64));
    if n_dark == 0 || n_bright == 0 || s_dark / n_dark as f64 > params.max_contrast_ratio * s_bright / n_bright as f64 {
        return Err(Error::NoVessel("no dark lumen contrast".into()));
    }
    let mask = fill_holes(&largest_component(&dark, w, h), w, h);
    let out = VesselMask { width: w, height: h, mask, threshold: t, source: None };
    if out.area_px() < params.min_area_px {
        return Err(Error::NoVessel(format!("lumen of {} px is below the minimum", out.area_px())));
    }
    Ok(out)
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks give 1.0 with a warning.
pub fn dice(a: &VesselMask, b: &VesselMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Invalid(format!(
            "mask dims {}x{} and {}x{} differ",
            a.width, a.height, b.width, b.height
        )));
    }
    let inter = a.mask.iter().zip(&b.mask).filter(|(&p, &q)| p && q).count();
    let total = a.area_px() + b.area_px();
    if total == 0 {
        log::warn!("dice of two empty masks defined as 1.0");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Euclidean centroid distance in mm for pixel pitches `(sx, sy)`.
pub fn centroid_offset_scaled(mask: &VesselMask, reference: &VesselMask, sx: f64, sy: f64) -> Result<f64> {
    let (a, b) = match (mask.centroid_px(), reference.centroid_px()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Invalid("centroid of an empty mask".into())),
    };
    Ok(((a.0 - b.0) * sx).hypot((a.1 - b.1) * sy))
}

pub fn centroid_offset(mask: &VesselMask, reference: &VesselMask, cal: &CalibrationParams) -> Result<f64> {
    centroid_offset_scaled(mask, reference, cal.lateral_scale(), cal.axial_scale())
}

pub fn cross_section_area(mask: &VesselMask, cal: &CalibrationParams) -> f64 {
    mask.area_px() as f64 * cal.pixel_area()
}

/// `k` distinct sorted indices out of `0..n` (all of them if `k >= n`).
pub fn sample_frames(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// One segmented view, with mm per pixel along columns and rows.
pub struct View<'a> {
    pub image: &'a FloatImage,
    pub valid: Option<&'a [bool]>,
    pub sx: f64,
    pub sy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    /// Frame index, or axial slice index for volumes.
    pub frame: usize,
    pub force: f64,
    pub dice_deformed: f64,
    pub dice_corrected: f64,
    pub offset_deformed_mm: Option<f64>,
    pub offset_corrected_mm: Option<f64>,
    pub area_truth_mm2: f64,
    pub area_deformed_mm2: f64,
    pub area_corrected_mm2: f64,
}

fn segment_or_empty(v: &View, params: &SegmentParams) -> Result<VesselMask> {
    match segment_vessel(v.image, v.valid, params) {
        Ok(m) => Ok(m),
        Err(Error::NoVessel(why)) => {
            log::warn!("no vessel segmented ({why}); scoring as an empty mask");
            let (w, h) = v.image.dims();
            Ok(VesselMask::empty(w, h))
        }
        Err(e) => Err(e),
    }
}

/// Compares deformed and corrected views against ground truth.
pub fn compare(truth: &View, deformed: &View, corrected: &View, params: &SegmentParams) -> Result<FrameMetrics> {
    let gt = segment_vessel(truth.image, truth.valid, params)?;
    let de = segment_or_empty(deformed, params)?;
    let co = segment_or_empty(corrected, params)?;
    let offset = |m: &VesselMask| (!m.is_empty()).then(|| centroid_offset_scaled(m, &gt, truth.sx, truth.sy)).transpose();
    let area = |m: &VesselMask, v: &View| m.area_px() as f64 * v.sx * v.sy;
    Ok(FrameMetrics {
        frame: 0,
        force: 0.0,
        dice_deformed: dice(&de, &gt)?,
        dice_corrected: dice(&co, &gt)?,
        offset_deformed_mm: offset(&de)?,
        offset_corrected_mm: offset(&co)?,
        area_truth_mm2: area(&gt, truth),
        area_deformed_mm2: area(&de, deformed),
        area_corrected_mm2: area(&co, corrected),
    })
}

/// Per-frame 2D comparison on the frames at `indices`.
pub fn evaluate_sweeps(
    truth: &SweepRecording,
    deformed: &SweepRecording,
    corrected: &SweepRecording,
    indices: &[usize],
    params: &SegmentParams,
    exec: Exec,
) -> Result<Vec<FrameMetrics>> {
    let n = truth.frames.len();
    if deformed.frames.len() != n || corrected.frames.len() != n {
        return Err(Error::Invalid("sweeps differ in frame count".into()));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Domain(format!("frame {i} out of range 0..{n}")));
    }
    let cal = truth.calibration();
    let (sx, sy) = (cal.lateral_scale(), cal.axial_scale());
    exec.try_map_range(indices.len(), |k| {
        let i = indices[k];
        let imgs = [&truth.frames[i], &deformed.frames[i], &corrected.frames[i]].map(|f| (f.float_image(), f.valid_mask()));
        let view = |j: usize| View { image: &imgs[j].0, valid: imgs[j].1.as_deref(), sx, sy };
        let mut m = compare(&view(0), &view(1), &view(2), params)?;
        m.frame = i;
        m.force = deformed.frames[i].force;
        Ok(m)
    })
}

/// Axial-slice comparison of three volumes on a common grid.
pub fn evaluate_volumes(
    truth: &Volume,
    deformed: &Volume,
    corrected: &Volume,
    slices: &[usize],
    force: f64,
    params: &SegmentParams,
    exec: Exec,
) -> Result<Vec<FrameMetrics>> {
    if truth.grid != deformed.grid || truth.grid != corrected.grid {
        return Err(Error::Invalid("volumes must share one grid".into()));
    }
    let s = truth.grid.spacing;
    exec.try_map_range(slices.len(), |k| {
        let j = slices[k];
        let sl = [truth, deformed, corrected].map(|v| v.extract_slice(Plane::Axial, j));
        let [a, b, c] = sl;
        let (a, b, c) = (a?, b?, c?);
        let [va, vb, vc] = [&a, &b, &c].map(|x| View { image: &x.image, valid: Some(&x.valid), sx: s, sy: s });
        let mut m = compare(&va, &vb, &vc, params)?;
        m.frame = j;
        m.force = force;
        Ok(m)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    fn of(v: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = v.collect();
        let (mean, sd) = mean_sd(&v);
        Self { mean, sd }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub force: f64,
    pub frames: usize,
    pub dice_deformed: Stat,
    pub dice_corrected: Stat,
    pub offset_deformed_mm: Stat,
    pub offset_corrected_mm: Stat,
    pub area_truth_mm2: Stat,
    pub area_deformed_mm2: Stat,
    pub area_corrected_mm2: Stat,
}

impl LevelSummary {
    /// Relative reduction of mean absolute area error achieved by correction.
    pub fn area_error_reduction(&self) -> f64 {
        let de = (self.area_deformed_mm2.mean - self.area_truth_mm2.mean).abs();
        let co = (self.area_corrected_mm2.mean - self.area_truth_mm2.mean).abs();
        if de == 0.0 { 0.0 } else { 1.0 - co / de }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<FrameMetrics>,
}

impl MetricsReport {
    /// Per force level summaries, in first-seen order of the rows' `level` key.
    pub fn summarize_by(&self, level: impl Fn(&FrameMetrics) -> f64) -> Vec<LevelSummary> {
        let mut keys: Vec<f64> = Vec::new();
        for r in &self.rows {
            let k = level(r);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|k| {
                let rows: Vec<&FrameMetrics> = self.rows.iter().filter(|r| level(r) == k).collect();
                let st = |f: &dyn Fn(&FrameMetrics) -> Option<f64>| Stat::of(rows.iter().filter_map(|r| f(r)));
                LevelSummary {
                    force: k,
                    frames: rows.len(),
                    dice_deformed: st(&|r| Some(r.dice_deformed)),
                    dice_corrected: st(&|r| Some(r.dice_corrected)),
                    offset_deformed_mm: st(&|r| r.offset_deformed_mm),
                    offset_corrected_mm: st(&|r| r.offset_corrected_mm),
                    area_truth_mm2: st(&|r| Some(r.area_truth_mm2)),
                    area_deformed_mm2: st(&|r| Some(r.area_deformed_mm2)),
                    area_corrected_mm2: st(&|r| Some(r.area_corrected_mm2)),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "frame,force,dice_deformed,dice_corrected,offset_deformed_mm,offset_corrected_mm,area_truth_mm2,area_deformed_mm2,area_corrected_mm2\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6}",
                r.frame,
                r.force,
                r.dice_deformed,
                r.dice_corrected,
                opt(r.offset_deformed_mm),
                opt(r.offset_corrected_mm),
                r.area_truth_mm2,
                r.area_deformed_mm2,
                r.area_corrected_mm2
            );
        }
        s
    }
}

/// Fixed-width table: one line per level, deformed vs corrected.
pub fn summary_table(levels: &[LevelSummary]) -> String {
    let mut s = String::from(
        "force_n  dice_def  dice_cor  offset_def_mm  offset_cor_mm  area_gt_mm2  area_def_mm2  area_cor_mm2\n",
    );
    for l in levels {
        let _ = writeln!(
            s,
            "{:>7.2}  {:>8.3}  {:>8.3}  {:>6.2}±{:<6.2}  {:>6.2}±{:<6.2}  {:>11.1}  {:>6.1}±{:<5.1}  {:>6.1}±{:<5.1}",
            l.force,
            l.dice_deformed.mean,
            l.dice_corrected.mean,
            l.offset_deformed_mm.mean,
            l.offset_deformed_mm.sd,
            l.offset_corrected_mm.mean,
            l.offset_corrected_mm.sd,
            l.area_truth_mm2.mean,
            l.area_deformed_mm2.mean,
            l.area_deformed_mm2.sd,
            l.area_corrected_mm2.mean,
            l.area_corrected_mm2.sd,
        );
    }
    s
}
