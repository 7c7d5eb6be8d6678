//! Shi-Tomasi feature selection and pyramidal Lucas-Kanade tracking.

use serde::{Deserialize, Serialize};

use crate::calibration::PixelCoord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::FloatImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LkParams {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    /// Odd window side, pixels.
    pub window: usize,
    pub max_iters: usize,
    /// Convergence threshold on the update, pixels.
    pub epsilon: f64,
    /// Minimum eigenvalue of the per-pixel structure tensor (gray²).
    pub min_eigen: f64,
    /// Maximum mean absolute intensity error after convergence.
    pub max_residual: f64,
    /// Largest displacement accepted, pixels.
    pub search_bound: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 15,
            max_iters: 30,
            epsilon: 0.01,
            min_eigen: 5.0,
            max_residual: 25.0,
            search_bound: 49.0,
        }
    }
}

impl LkParams {
    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.window < 3 || self.window % 2 == 0 || self.max_iters == 0 {
            return Err(Error::Invalid(
                "LK needs >= 1 level, an odd window >= 3 and >= 1 iteration".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.search_bound > 0.0 && self.max_residual > 0.0 && self.min_eigen >= 0.0) {
            return Err(Error::Invalid("LK thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureParams {
    pub n_points: usize,
    /// Minimum spacing between selected points, pixels.
    pub min_distance: f64,
    /// Distance kept from the image border, pixels.
    pub margin: usize,
    /// Side of the structure-tensor summation window.
    pub block: usize,
    /// Response floor relative to the strongest corner.
    pub quality: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            n_points: 50,
            min_distance: 10.0,
            margin: 16,
            block: 7,
            quality: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LostReason {
    /// Structure tensor near singular (no texture).
    Singular,
    Residual,
    OutOfBounds,
    SearchBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tracked,
    Lost(LostReason),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedPoint {
    pub ref_pixel: PixelCoord,
    /// `position in current − position in reference`, pixels; `None` when lost.
    pub displacement: Option<[f64; 2]>,
    pub status: TrackStatus,
    pub residual: f64,
}

impl TrackedPoint {
    fn lost(p: PixelCoord, reason: LostReason, residual: f64) -> Self {
        Self {
            ref_pixel: p,
            displacement: None,
            status: TrackStatus::Lost(reason),
            residual,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.status == TrackStatus::Tracked
    }
}

/// Minimum eigenvalue of `[[a, b], [b, c]]`.
#[inline]
fn min_eigen(a: f64, b: f64, c: f64) -> f64 {
    0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

/// Shi-Tomasi corner response (minimum structure-tensor eigenvalue, summed
/// over a `block × block` window) at every pixel.
pub fn corner_response(img: &FloatImage, block: usize) -> FloatImage {
    let (gx, gy) = img.gradients();
    let (w, h) = img.dims();
    let r = (block / 2) as isize;
    let box_sum = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        // separable box filter with clamped borders
        let vals: Vec<f64> = (0..w * h).map(f).collect();
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += vals[y * w + xx];
                }
                tmp[y * w + x] = s;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += tmp[yy * w + x];
                }
                out[y * w + x] = s;
            }
        }
        out
    };
    let sxx = box_sum(&|i| (gx.data[i] as f64).powi(2));
    let sxy = box_sum(&|i| gx.data[i] as f64 * gy.data[i] as f64);
    let syy = box_sum(&|i| (gy.data[i] as f64).powi(2));
    let mut out = FloatImage::new(w, h);
    for i in 0..w * h {
        out.data[i] = min_eigen(sxx[i], sxy[i], syy[i]) as f32;
    }
    out
}

/// Strongest corners with a minimum mutual spacing, in response order.
pub fn select_features(img: &FloatImage, params: &FeatureParams) -> Result<Vec<PixelCoord>> {
    if params.n_points < 8 {
        return Err(Error::Invalid(format!("need at least 8 features, asked for {}", params.n_points)));
    }
    let (w, h) = img.dims();
    let m = params.margin;
    if w <= 2 * m || h <= 2 * m {
        return Err(Error::Invalid("image smaller than the feature margin".into()));
    }
    let resp = corner_response(img, params.block);
    let mut cand: Vec<(f32, usize)> = Vec::new();
    for y in m..h - m {
        for x in m..w - m {
            cand.push((resp.get(x, y), y * w + x));
        }
    }
    let best = cand.iter().map(|c| c.0).fold(0.0f32, f32::max);
    if !(best > 1e-6) {
        return Err(Error::NoFeatures);
    }
    let floor = best * params.quality as f32;
    cand.retain(|c| c.0 >= floor);
    // Stable order: response descending, raster index ascending.
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let d2 = params.min_distance * params.min_distance;
    let mut chosen: Vec<PixelCoord> = Vec::with_capacity(params.n_points);
    for (_, idx) in cand {
        let p = PixelCoord::new((idx % w) as f64, (idx / w) as f64);
        if chosen.iter().all(|q| (q.x - p.x).powi(2) + (q.y - p.y).powi(2) >= d2) {
            chosen.push(p);
            if chosen.len() == params.n_points {
                break;
            }
        }
    }
    if chosen.is_empty() {
        return Err(Error::NoFeatures);
    }
    Ok(chosen)
}

struct Level {
    img: FloatImage,
    gx: FloatImage,
    gy: FloatImage,
}

/// Gaussian pyramid with gradients at every level.
pub struct Pyramid {
    levels: Vec<Level>,
}

impl Pyramid {
    pub fn new(img: &FloatImage, n_levels: usize) -> Self {
        let mut levels = Vec::with_capacity(n_levels);
        let mut cur = img.clone();
        for l in 0..n_levels {
            if l > 0 {
                cur = cur.pyr_down();
            }
            let (gx, gy) = cur.gradients();
            levels.push(Level { img: cur.clone(), gx, gy });
        }
        Self { levels }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.levels[0].img.dims()
    }
}

/// Tracks `points` from `reference` into `current`.
pub fn track(reference: &FloatImage, current: &FloatImage, points: &[PixelCoord], params: &LkParams, exec: Exec) -> Result<Vec<TrackedPoint>> {
    if reference.dims() != current.dims() {
        return Err(Error::Invalid(format!(
            "image dimensions differ: {:?} vs {:?}",
            reference.dims(),
            current.dims()
        )));
    }
    params.validate()?;
    let a = Pyramid::new(reference, params.levels);
    let b = Pyramid::new(current, params.levels);
    let guesses = vec![[0.0, 0.0]; points.len()];
    track_pyramids(&a, &b, points, &guesses, params, exec)
}

/// Pyramidal LK with per-point initial displacement guesses.
pub fn track_pyramids(
    reference: &Pyramid,
    current: &Pyramid,
    points: &[PixelCoord],
    guesses: &[[f64; 2]],
    params: &LkParams,
    exec: Exec,
) -> Result<Vec<TrackedPoint>> {
    let (w, h) = reference.dims();
    let r = params.half_window() as f64;
    for p in points {
        if !(p.x >= r && p.y >= r && p.x <= w as f64 - 1.0 - r && p.y <= h as f64 - 1.0 - r) {
            return Err(Error::Domain(format!(
                "point ({}, {}) closer than the half window to the border",
                p.x, p.y
            )));
        }
    }
    let idx: Vec<usize> = (0..points.len()).collect();
    Ok(exec.map_slice(&idx, |&i| track_one(reference, current, points[i], guesses[i], params)))
}

fn track_one(reference: &Pyramid, current: &Pyramid, p: PixelCoord, guess: [f64; 2], params: &LkParams) -> TrackedPoint {
    let r = params.half_window() as isize;
    let n_levels = reference.levels.len().min(current.levels.len());
    let top = (n_levels - 1) as i32;
    let npix = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut g = [guess[0] / 2f64.powi(top), guess[1] / 2f64.powi(top)];
    let mut template = Vec::with_capacity(npix as usize);
    for l in (0..n_levels).rev() {
        let lr = &reference.levels[l];
        let lc = &current.levels[l];
        let scale = 2f64.powi(l as i32);
        let (px, py) = (p.x / scale, p.y / scale);
        template.clear();
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px + dx as f64, py + dy as f64);
                let i = lr.img.bilinear_clamped(x, y) as f64;
                let ix = lr.gx.bilinear_clamped(x, y) as f64;
                let iy = lr.gy.bilinear_clamped(x, y) as f64;
                gxx += ix * ix;
                gxy += ix * iy;
                gyy += iy * iy;
                template.push((i, ix, iy));
            }
        }
        let det = gxx * gyy - gxy * gxy;
        let lmin = min_eigen(gxx, gxy, gyy) / npix;
        if l == 0 && lmin < params.min_eigen {
            return TrackedPoint::lost(p, LostReason::Singular, f64::NAN);
        }
        let mut v = [0.0, 0.0];
        if det > 1e-12 * (gxx + gyy).powi(2) && det > 0.0 {
            for _ in 0..params.max_iters {
                let (mut bx, mut by) = (0.0, 0.0);
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (i, ix, iy) = template[k];
                        k += 1;
                        let j = lc.img.bilinear_clamped(px + dx as f64 + g[0] + v[0], py + dy as f64 + g[1] + v[1]) as f64;
                        let diff = i - j;
                        bx += diff * ix;
                        by += diff * iy;
                    }
                }
                let ex = (gyy * bx - gxy * by) / det;
                let ey = (gxx * by - gxy * bx) / det;
                v[0] += ex;
                v[1] += ey;
                if (ex * ex + ey * ey).sqrt() < params.epsilon {
                    break;
                }
                if !(v[0].is_finite() && v[1].is_finite()) {
                    break;
                }
            }
        }
        if l > 0 {
            g = [2.0 * (g[0] + v[0]), 2.0 * (g[1] + v[1])];
        } else {
            g = [g[0] + v[0], g[1] + v[1]];
        }
    }
    let d = g;
    if !(d[0].is_finite() && d[1].is_finite()) || (d[0] * d[0] + d[1] * d[1]).sqrt() > params.search_bound {
        return TrackedPoint::lost(p, LostReason::SearchBound, f64::NAN);
    }
    let (w, h) = reference.dims();
    let (qx, qy) = (p.x + d[0], p.y + d[1]);
    if !(qx >= 0.0 && qy >= 0.0 && qx <= (w - 1) as f64 && qy <= (h - 1) as f64) {
        return TrackedPoint::lost(p, LostReason::OutOfBounds, f64::NAN);
    }
    let l0r = &reference.levels[0].img;
    let l0c = &current.levels[0].img;
    let mut res = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let i = l0r.bilinear_clamped(p.x + dx as f64, p.y + dy as f64) as f64;
            let j = l0c.bilinear_clamped(qx + dx as f64, qy + dy as f64) as f64;
            res += (i - j).abs();
        }
    }
    let residual = res / npix;
    if residual > params.max_residual {
        return TrackedPoint::lost(p, LostReason::Residual, residual);
    }
    TrackedPoint {
        ref_pixel: p,
        displacement: Some(d),
        status: TrackStatus::Tracked,
        residual,
    }
}

/// Chained tracking over a sequence: each frame is tracked from its
/// predecessor and displacements are accumulated relative to frame 0.
/// Entry `k` of the result holds the tracks of frame `k` (frame 0 is zero).
pub fn track_sequence(frames: &[FloatImage], points: &[PixelCoord], params: &LkParams, exec: Exec) -> Result<Vec<Vec<TrackedPoint>>> {
    params.validate()?;
    if frames.is_empty() {
        return Ok(vec![]);
    }
    let dims = frames[0].dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
        return Err(Error::Invalid(format!("frame dimensions differ: {:?} vs {dims:?}", f.dims())));
    }
    let (w, h) = dims;
    let r = params.half_window() as f64;
    let inside = |x: f64, y: f64| x >= r && y >= r && x <= w as f64 - 1.0 - r && y <= h as f64 - 1.0 - r;

    let zero: Vec<TrackedPoint> = points
        .iter()
        .map(|&p| TrackedPoint {
            ref_pixel: p,
            displacement: Some([0.0, 0.0]),
            status: TrackStatus::Tracked,
            residual: 0.0,
        })
        .collect();
    let mut out = vec![zero];
    let mut prev = Pyramid::new(&frames[0], params.levels);
    for frame in &frames[1..] {
        let cur = Pyramid::new(frame, params.levels);
        let last = out.last().unwrap();
        // Positions of still-tracked points in the previous frame.
        let live: Vec<usize> = (0..points.len())
            .filter(|&i| {
                last[i].displacement.is_some_and(|d| inside(points[i].x + d[0], points[i].y + d[1]))
            })
            .collect();
        let pos: Vec<PixelCoord> = live
            .iter()
            .map(|&i| {
                let d = last[i].displacement.unwrap();
                PixelCoord::new(points[i].x + d[0], points[i].y + d[1])
            })
            .collect();
        let guesses = vec![[0.0, 0.0]; pos.len()];
        let steps = track_pyramids(&prev, &cur, &pos, &guesses, params, exec)?;
        let mut next: Vec<TrackedPoint> = last
            .iter()
            .map(|t| match t.status {
                TrackStatus::Lost(_) => *t,
                TrackStatus::Tracked => TrackedPoint::lost(t.ref_pixel, LostReason::OutOfBounds, f64::NAN),
            })
            .collect();
        for (k, &i) in live.iter().enumerate() {
            let s = steps[k];
            let acc = last[i].displacement.unwrap();
            next[i] = match s.displacement {
                Some(d) => TrackedPoint {
                    ref_pixel: points[i],
                    displacement: Some([acc[0] + d[0], acc[1] + d[1]]),
                    status: TrackStatus::Tracked,
                    residual: s.residual,
                },
                None => TrackedPoint { ref_pixel: points[i], ..s },
            };
        }
        out.push(next);
        prev = cur;
    }
    Ok(out)
}

/// Comma-separated dump of a track table.
pub fn tracks_to_csv(frames: &[Vec<TrackedPoint>]) -> String {
    let mut s = String::from("frame,point,ref_x,ref_y,dx,dy,status,residual\n");
    for (k, pts) in frames.iter().enumerate() {
        for (i, t) in pts.iter().enumerate() {
            let (dx, dy) = t.displacement.map_or((String::new(), String::new()), |d| (d[0].to_string(), d[1].to_string()));
            let status = match t.status {
                TrackStatus::Tracked => "tracked".to_string(),
                TrackStatus::Lost(r) => format!("lost_{}", format!("{r:?}").to_lowercase()),
            };
            s.push_str(&format!("{k},{i},{},{},{dx},{dy},{status},{}\n", t.ref_pixel.x, t.ref_pixel.y, t.residual));
        }
    }
    s
}
