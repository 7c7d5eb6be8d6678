//! Coupled second-order displacement regression.
//!
//! Each image axis has a 10-parameter model over the basis
//! `M = [x², y², h², xy, xh, yh, x, y, h, 1]` in normalised pixel position
//! `(x, y)` and load `h`. The cumulative displacement at contact force `F` is
//! accumulated over `n_force_intervals` force steps, holding `k_d` constant
//! inside each step and evaluating it at the step midpoint. The per-step
//! increments telescope, so the total reduces to `K·(M(x, y, H) − M(x, y, 0))`
//! with `H = Σ ΔF / k_d(λ(F_mid))`; the force-free basis terms cancel and are
//! held at zero in fitted models, which makes `D(0) = 0` exact.

use log::warn;
use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::SweepRecording;
use crate::optical_flow::TrackedPoint;
use crate::stiffness::{indentations_from_poses, StiffnessModel, CONTACT_THRESHOLD};

pub const BASIS_LEN: usize = 10;
/// Basis indices that depend on `h`: `h², xh, yh, h`.
pub const LOAD_TERMS: [usize; 4] = [2, 4, 5, 8];
pub const DEFAULT_FORCE_INTERVALS: usize = 64;
pub const DEFAULT_BOUNDARY_SAMPLES: usize = 64;
/// Normalised inputs are clamped to this upper bound.
pub const INPUT_CLAMP: f64 = 1.2;
pub const MIN_FORCE_LEVELS: usize = 5;

/// `[x², y², h², xy, xh, yh, x, y, h, 1]`.
pub fn basis(x: f64, y: f64, h: f64) -> [f64; BASIS_LEN] {
    [x * x, y * y, h * h, x * y, x * h, y * h, x, y, h, 1.0]
}

/// `M(x, y, h) − M(x, y, 0)` restricted to [`LOAD_TERMS`].
#[inline]
fn load_features(x: f64, y: f64, h: f64) -> Vector4<f64> {
    Vector4::new(h * h, x * h, y * h, h)
}

fn dot(k: &[f64; BASIS_LEN], m: &[f64; BASIS_LEN]) -> f64 {
    k.iter().zip(m).map(|(a, b)| a * b).sum()
}

/// Integrated load `H = ∫ dF / k_d` over `[max(c3, 0), F]` by the midpoint rule.
pub fn cumulative_load(stiffness: &StiffnessModel, force: f64, n_intervals: usize) -> Result<f64> {
    if !(force >= 0.0) {
        return Err(Error::Domain(format!("contact force {force} N must be >= 0")));
    }
    if n_intervals == 0 {
        return Err(Error::Invalid("n_force_intervals must be >= 1".into()));
    }
    let onset = stiffness.c3.clamp(0.0, force);
    if force <= onset {
        return Ok(0.0);
    }
    let law = stiffness.law();
    let step = (force - onset) / n_intervals as f64;
    let mut h = 0.0;
    for i in 0..n_intervals {
        let mid = onset + (i as f64 + 0.5) * step;
        let kd = law.stiffness_at_force(mid)?;
        if !(kd > 0.0) {
            return Err(Error::Domain(format!("non-positive stiffness {kd} N/mm at {mid} N")));
        }
        h += step / kd;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    /// Lateral pixel scale (`L_I`).
    pub x_scale: f64,
    /// Axial pixel scale (`W_I`).
    pub y_scale: f64,
    /// Load scale, mm.
    pub h_scale: f64,
    pub dx_scale: f64,
    pub dy_scale: f64,
}

impl Normalization {
    fn validate(&self) -> Result<()> {
        let v = [self.x_scale, self.y_scale, self.h_scale, self.dx_scale, self.dy_scale];
        if v.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Invalid("normalisation scales must be positive".into()))
        }
    }

    /// Normalised `(x, y, h)`, clamped to `[0, INPUT_CLAMP]`; flags clamping.
    pub fn inputs(&self, x: f64, y: f64, h: f64) -> ([f64; 3], bool) {
        let raw = [x / self.x_scale, y / self.y_scale, h / self.h_scale];
        let mut clamped = false;
        let out = raw.map(|v| {
            let c = v.clamp(0.0, INPUT_CLAMP);
            clamped |= c != v;
            c
        });
        (out, clamped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplacementRegression {
    pub kx: [f64; BASIS_LEN],
    pub ky: [f64; BASIS_LEN],
    pub norms: Normalization,
    pub n_force_intervals: usize,
    pub final_loss: f64,
    #[serde(default)]
    pub iterations: usize,
}

impl DisplacementRegression {
    pub fn validate(&self) -> Result<()> {
        self.norms.validate()?;
        if self.n_force_intervals == 0 {
            return Err(Error::Invalid("n_force_intervals must be >= 1".into()));
        }
        if self.kx.iter().chain(&self.ky).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("regression coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Single-shot model `[Kx; Ky]·M(x, y, F / k_d)`, in pixels.
    pub fn eval_increment(&self, x: f64, y: f64, force: f64, kd: f64) -> Result<(f64, f64)> {
        if !(kd > 0.0) {
            return Err(Error::Domain(format!("dynamic stiffness {kd} must be > 0")));
        }
        let ([xn, yn, hn], clamped) = self.norms.inputs(x, y, force / kd);
        if clamped {
            warn!("regression input ({x}, {y}, h = {}) clamped to the normalised range", force / kd);
        }
        let m = basis(xn, yn, hn);
        Ok((dot(&self.kx, &m) * self.norms.dx_scale, dot(&self.ky, &m) * self.norms.dy_scale))
    }

    /// Cumulative displacement at contact force `force`, in pixels.
    pub fn eval_cumulative(&self, x: f64, y: f64, force: f64, stiffness: &StiffnessModel) -> Result<(f64, f64)> {
        let h = cumulative_load(stiffness, force, self.n_force_intervals)?;
        let (hn, clamped) = self.load_normalized(h);
        if clamped {
            warn!("integrated load {h:.4} mm beyond the trained range; clamped");
        }
        Ok(self.eval_load_normalized(x, y, hn))
    }

    /// Normalised load and whether it was clamped.
    pub fn load_normalized(&self, h: f64) -> (f64, bool) {
        let hn = h / self.norms.h_scale;
        let c = hn.clamp(0.0, INPUT_CLAMP);
        (c, c != hn)
    }

    /// `K·(M(x, y, h) − M(x, y, 0))` for a pre-normalised load.
    #[inline]
    pub fn eval_load_normalized(&self, x: f64, y: f64, hn: f64) -> (f64, f64) {
        let xn = (x / self.norms.x_scale).clamp(0.0, INPUT_CLAMP);
        let yn = (y / self.norms.y_scale).clamp(0.0, INPUT_CLAMP);
        let phi = load_features(xn, yn, hn);
        let (mut dx, mut dy) = (0.0, 0.0);
        for (j, &idx) in LOAD_TERMS.iter().enumerate() {
            dx += self.kx[idx] * phi[j];
            dy += self.ky[idx] * phi[j];
        }
        (dx * self.norms.dx_scale, dy * self.norms.dy_scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Flow,
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    /// Reference pixel position.
    pub x: f64,
    pub y: f64,
    pub level: usize,
    /// Measured displacement, pixels.
    pub dx: f64,
    pub dy: f64,
    pub kind: SampleKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceLevel {
    pub force: f64,
    /// Indentation, mm.
    pub lambda: f64,
    /// Integrated load, mm.
    pub load: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    pub levels: Vec<ForceLevel>,
    pub stiffness: StiffnessModel,
    pub layer_thickness_mm: f64,
    /// `(L_I, W_I)`.
    pub dims: (u32, u32),
    pub n_force_intervals: usize,
}

impl TrainingSet {
    pub fn flow_count(&self) -> usize {
        self.samples.iter().filter(|s| s.kind == SampleKind::Flow).count()
    }

    /// Samples per force level (mean).
    pub fn points_per_level(&self) -> f64 {
        self.samples.len() as f64 / self.levels.len() as f64
    }

    /// Bottom-row axial displacement imposed at a force level, pixels.
    pub fn bottom_target(&self, level: usize) -> f64 {
        -(self.levels[level].lambda / self.layer_thickness_mm) * self.dims.1 as f64
    }
}

/// Per-level inputs to [`build_training_set_from_levels`].
#[derive(Clone, Debug)]
pub struct LevelObservation<'a> {
    pub force: f64,
    pub lambda: Option<f64>,
    pub tracks: &'a [TrackedPoint],
}

pub fn build_training_set(
    palpation: &SweepRecording,
    tracks: &[Vec<TrackedPoint>],
    stiffness: &StiffnessModel,
    layer_thickness_mm: f64,
    n_boundary: usize,
    n_force_intervals: usize,
) -> Result<TrainingSet> {
    if tracks.len() != palpation.frames.len() {
        return Err(Error::Invalid(format!(
            "{} track sets for {} palpation frames",
            tracks.len(),
            palpation.frames.len()
        )));
    }
    // Frames before contact have zero indentation by definition.
    let lambdas = indentations_from_poses(&palpation.frames, CONTACT_THRESHOLD)?;
    let levels: Vec<LevelObservation> = palpation
        .frames
        .iter()
        .zip(lambdas)
        .zip(tracks)
        .map(|((f, l), t)| LevelObservation {
            force: f.force,
            lambda: Some(l.unwrap_or(0.0)),
            tracks: t,
        })
        .collect();
    build_training_set_from_levels(
        &levels,
        stiffness,
        palpation.calibration().dims(),
        layer_thickness_mm,
        n_boundary,
        n_force_intervals,
    )
}

pub fn build_training_set_from_levels(
    observations: &[LevelObservation],
    stiffness: &StiffnessModel,
    dims: (u32, u32),
    layer_thickness_mm: f64,
    n_boundary: usize,
    n_force_intervals: usize,
) -> Result<TrainingSet> {
    if !(layer_thickness_mm.is_finite() && layer_thickness_mm > 0.0) {
        return Err(Error::Invalid("layer thickness L_T must be > 0".into()));
    }
    if observations.len() < MIN_FORCE_LEVELS {
        return Err(Error::Invalid(format!(
            "training needs at least {MIN_FORCE_LEVELS} force levels, got {}",
            observations.len()
        )));
    }
    let (li, wi) = (dims.0 as f64, dims.1 as f64);
    let n_top = n_boundary / 2;
    let n_bottom = n_boundary - n_top;
    let xs = |n: usize| -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![li / 2.0],
            _ => (0..n).map(|i| 1.0 + (li - 1.0) * i as f64 / (n - 1) as f64).collect(),
        }
    };
    let (top_x, bottom_x) = (xs(n_top), xs(n_bottom));

    let mut samples = Vec::new();
    let mut levels = Vec::with_capacity(observations.len());
    for (k, obs) in observations.iter().enumerate() {
        let lambda = obs
            .lambda
            .ok_or_else(|| Error::Invalid(format!("missing indentation for force level {k}")))?;
        let load = cumulative_load(stiffness, obs.force, n_force_intervals)?;
        levels.push(ForceLevel { force: obs.force, lambda, load });
        for t in obs.tracks {
            if let Some([dx, dy]) = t.displacement {
                samples.push(TrainingSample {
                    x: t.ref_pixel.x,
                    y: t.ref_pixel.y,
                    level: k,
                    dx,
                    dy,
                    kind: SampleKind::Flow,
                });
            }
        }
        for &x in &top_x {
            samples.push(TrainingSample { x, y: 0.0, level: k, dx: 0.0, dy: 0.0, kind: SampleKind::Boundary });
        }
        let bottom = -(lambda / layer_thickness_mm) * wi;
        for &x in &bottom_x {
            samples.push(TrainingSample { x, y: wi, level: k, dx: 0.0, dy: bottom, kind: SampleKind::Boundary });
        }
    }
    let ts = TrainingSet {
        samples,
        levels,
        stiffness: *stiffness,
        layer_thickness_mm,
        dims,
        n_force_intervals,
    };
    if ts.flow_count() == 0 {
        warn!("training set has boundary samples only; the interior field is under-determined");
    }
    Ok(ts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop when the loss improves by less than `tolerance` over `patience` iterations.
    pub tolerance: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 20_000,
            tolerance: 1e-10,
            patience: 200,
            seed: 0,
        }
    }
}

/// Quadratic loss in normalised units: mean over samples of `|D − D^m|²`.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    gram: Matrix4<f64>,
    bx: Vector4<f64>,
    by: Vector4<f64>,
    c: f64,
    pub norms: Normalization,
    pub n_force_intervals: usize,
    pub n_samples: usize,
}

impl QuadraticLoss {
    pub fn new(ts: &TrainingSet) -> Result<Self> {
        if ts.samples.is_empty() {
            return Err(Error::Invalid("training set has no samples".into()));
        }
        let h_max = ts.levels.iter().map(|l| l.load).fold(0.0, f64::max);
        let d_max = ts.samples.iter().map(|s| s.dx.abs().max(s.dy.abs())).fold(0.0, f64::max);
        let norms = Normalization {
            x_scale: ts.dims.0 as f64,
            y_scale: ts.dims.1 as f64,
            h_scale: if h_max > 0.0 { h_max } else { 1.0 },
            dx_scale: if d_max > 0.0 { d_max } else { 1.0 },
            dy_scale: if d_max > 0.0 { d_max } else { 1.0 },
        };
        let mut gram = Matrix4::zeros();
        let (mut bx, mut by, mut c) = (Vector4::zeros(), Vector4::zeros(), 0.0);
        for s in &ts.samples {
            let ([xn, yn, hn], _) = norms.inputs(s.x, s.y, ts.levels[s.level].load);
            let phi = load_features(xn, yn, hn);
            let (tx, ty) = (s.dx / norms.dx_scale, s.dy / norms.dy_scale);
            gram += phi * phi.transpose();
            bx += phi * tx;
            by += phi * ty;
            c += tx * tx + ty * ty;
        }
        let n = ts.samples.len() as f64;
        Ok(Self {
            gram: gram / n,
            bx: bx / n,
            by: by / n,
            c: c / n,
            norms,
            n_force_intervals: ts.n_force_intervals,
            n_samples: ts.samples.len(),
        })
    }

    /// Loss at live parameters `(kx, ky)` over [`LOAD_TERMS`].
    pub fn value(&self, kx: &Vector4<f64>, ky: &Vector4<f64>) -> f64 {
        let q = |k: &Vector4<f64>, b: &Vector4<f64>| (k.transpose() * self.gram * k)[0] - 2.0 * b.dot(k);
        (q(kx, &self.bx) + q(ky, &self.by) + self.c).max(0.0)
    }

    pub fn gradient(&self, kx: &Vector4<f64>, ky: &Vector4<f64>) -> (Vector4<f64>, Vector4<f64>) {
        (2.0 * (self.gram * kx - self.bx), 2.0 * (self.gram * ky - self.by))
    }

    fn model(&self, kx: &Vector4<f64>, ky: &Vector4<f64>, loss: f64, iterations: usize) -> DisplacementRegression {
        let mut fx = [0.0; BASIS_LEN];
        let mut fy = [0.0; BASIS_LEN];
        for (j, &idx) in LOAD_TERMS.iter().enumerate() {
            fx[idx] = kx[j];
            fy[idx] = ky[j];
        }
        DisplacementRegression {
            kx: fx,
            ky: fy,
            norms: self.norms,
            n_force_intervals: self.n_force_intervals,
            final_loss: loss,
            iterations,
        }
    }

    /// Minimum-norm least-squares solution (cross-check for the optimiser).
    pub fn solve_closed_form(&self) -> Result<DisplacementRegression> {
        let svd = self.gram.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let kx = svd.solve(&self.bx, tol).map_err(|e| Error::Numerical(e.to_string()))?;
        let ky = svd.solve(&self.by, tol).map_err(|e| Error::Numerical(e.to_string()))?;
        let loss = self.value(&kx, &ky);
        Ok(self.model(&kx, &ky, loss, 0))
    }
}

/// Mean squared residual of `reg` on `ts`, evaluated sample by sample in
/// normalised units (independent of [`QuadraticLoss`]).
pub fn training_loss(reg: &DisplacementRegression, ts: &TrainingSet) -> Result<f64> {
    let mut acc = 0.0;
    for s in &ts.samples {
        let force = ts.levels[s.level].force;
        let (dx, dy) = reg.eval_cumulative(s.x, s.y, force, &ts.stiffness)?;
        acc += ((dx - s.dx) / reg.norms.dx_scale).powi(2) + ((dy - s.dy) / reg.norms.dy_scale).powi(2);
    }
    Ok(acc / ts.samples.len() as f64)
}

/// Fits the regression by ADAM on the quadratic loss.
pub fn fit_regression(ts: &TrainingSet, opts: &FitOptions) -> Result<DisplacementRegression> {
    if !(opts.learning_rate > 0.0) || opts.max_iters == 0 {
        return Err(Error::Invalid("learning rate and iteration budget must be positive".into()));
    }
    let loss = QuadraticLoss::new(ts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut theta = [Vector4::<f64>::zeros(); 2];
    for k in theta.iter_mut() {
        for v in k.iter_mut() {
            *v = rng.random_range(-0.01..0.01);
        }
    }
    let mut m = [Vector4::<f64>::zeros(); 2];
    let mut v = [Vector4::<f64>::zeros(); 2];
    let mut history = Vec::with_capacity(opts.max_iters.min(4096));
    let mut value = loss.value(&theta[0], &theta[1]);
    let mut iterations = 0;
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for it in 0..opts.max_iters {
        let (gx, gy) = loss.gradient(&theta[0], &theta[1]);
        b1t *= opts.beta1;
        b2t *= opts.beta2;
        for (i, g) in [gx, gy].iter().enumerate() {
            m[i] = m[i] * opts.beta1 + g * (1.0 - opts.beta1);
            v[i] = v[i] * opts.beta2 + g.component_mul(g) * (1.0 - opts.beta2);
            let mhat = m[i] / (1.0 - b1t);
            let vhat = v[i] / (1.0 - b2t);
            let step = mhat.zip_map(&vhat, |a, b| a / (b.sqrt() + opts.epsilon));
            theta[i] -= step * opts.learning_rate;
        }
        value = loss.value(&theta[0], &theta[1]);
        iterations = it + 1;
        if !value.is_finite() || theta.iter().any(|k| k.iter().any(|c| !c.is_finite())) {
            let start = history.len().saturating_sub(10);
            return Err(Error::Divergence {
                iteration: it,
                trace: history[start..].to_vec(),
            });
        }
        history.push(value);
        if history.len() > opts.patience {
            let before = history[history.len() - 1 - opts.patience];
            if before - value < opts.tolerance {
                break;
            }
        }
    }
    Ok(loss.model(&theta[0], &theta[1], value, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::PixelCoord;
    use crate::optical_flow::TrackStatus;
    use crate::stiffness::ForceLaw;
    use proptest::prelude::*;

    const TABLE_KX: [f64; 10] = [-0.027, -0.001, 0.015, -0.025, -0.024, -0.027, 0.029, 0.003, 0.016, -0.201];
    const TABLE_KY: [f64; 10] = [-0.143, -0.189, -0.462, -0.087, -0.081, 0.369, 0.080, -0.191, 0.229, -0.223];

    fn unit_norms() -> Normalization {
        Normalization { x_scale: 400.0, y_scale: 300.0, h_scale: 10.0, dx_scale: 1.0, dy_scale: 1.0 }
    }

    fn reg(kx: [f64; 10], ky: [f64; 10]) -> DisplacementRegression {
        DisplacementRegression { kx, ky, norms: unit_norms(), n_force_intervals: 64, final_loss: 0.0, iterations: 0 }
    }

    fn linear_stiffness(c2: f64) -> StiffnessModel {
        StiffnessModel::from_law(ForceLaw::new(0.0, c2, 0.0), 10.0)
    }

    #[test]
    fn zero_parameters_give_zero() {
        let r = reg([0.0; 10], [0.0; 10]);
        assert_eq!(r.eval_increment(100.0, 50.0, 5.0, 2.0).unwrap(), (0.0, 0.0));
        assert_eq!(r.eval_cumulative(100.0, 50.0, 5.0, &linear_stiffness(2.0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn table_parameters_dot_product() {
        let r = reg(TABLE_KX, TABLE_KY);
        // x = 0.5, y = 0.5, h = 0.4 normalised
        let (dx, dy) = r.eval_increment(200.0, 150.0, 8.0, 2.0).unwrap();
        let m = [0.25, 0.25, 0.16, 0.25, 0.2, 0.2, 0.5, 0.5, 0.4, 1.0];
        let hand_x: f64 = TABLE_KX.iter().zip(m).map(|(a, b)| a * b).sum();
        let hand_y: f64 = TABLE_KY.iter().zip(m).map(|(a, b)| a * b).sum();
        assert!((dx - hand_x).abs() < 1e-15 && (dy - hand_y).abs() < 1e-15);
        assert!((hand_x - -0.19965).abs() < 1e-12, "{hand_x}");
    }

    #[test]
    fn force_free_terms_ignore_load() {
        let mut kx = TABLE_KX;
        let mut ky = TABLE_KY;
        for idx in LOAD_TERMS {
            kx[idx] = 0.0;
            ky[idx] = 0.0;
        }
        let r = reg(kx, ky);
        let a = r.eval_increment(120.0, 80.0, 0.0, 3.0).unwrap();
        let b = r.eval_increment(120.0, 80.0, 9.0, 3.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonpositive_stiffness_rejected() {
        let r = reg(TABLE_KX, TABLE_KY);
        assert!(matches!(r.eval_increment(1.0, 1.0, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(r.eval_cumulative(1.0, 1.0, -1.0, &linear_stiffness(2.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn cumulative_zero_at_zero_force_even_with_constant_terms() {
        let r = reg(TABLE_KX, TABLE_KY);
        let soft = StiffnessModel::from_law(ForceLaw::new(0.07, 0.5, 0.5), 12.0);
        for (x, y) in [(0.0, 0.0), (123.0, 45.0), (400.0, 300.0)] {
            assert_eq!(r.eval_cumulative(x, y, 0.0, &soft).unwrap(), (0.0, 0.0));
        }
    }

    #[test]
    fn linear_tissue_collapses_to_single_shot() {
        let mut kx = [0.0; 10];
        let mut ky = [0.0; 10];
        for (j, idx) in LOAD_TERMS.iter().enumerate() {
            kx[*idx] = 0.1 * (j as f64 + 1.0);
            ky[*idx] = -0.3 + 0.05 * j as f64;
        }
        let r = reg(kx, ky);
        let lin = linear_stiffness(3.2);
        for f in [0.5, 4.0, 17.0] {
            let a = r.eval_cumulative(210.0, 170.0, f, &lin).unwrap();
            let b = r.eval_increment(210.0, 170.0, f, 3.2).unwrap();
            assert!((a.0 - b.0).abs() <= 1e-6 * b.0.abs() && (a.1 - b.1).abs() <= 1e-6 * b.1.abs());
        }
    }

    #[test]
    fn load_integral_tracks_indentation() {
        let m = StiffnessModel::from_law(ForceLaw::new(0.0708, 0.5, 0.5), 12.0);
        let exact = m.indentation_for_force(16.0).unwrap();
        let h64 = cumulative_load(&m, 16.0, 64).unwrap();
        let h128 = cumulative_load(&m, 16.0, 128).unwrap();
        assert!((h128 - exact).abs() < (h64 - exact).abs());
        assert!((h64 - exact).abs() / exact < 1e-3);
        assert_eq!(cumulative_load(&m, 0.3, 64).unwrap(), 0.0);
    }

    fn tracked(x: f64, y: f64, d: [f64; 2]) -> TrackedPoint {
        TrackedPoint { ref_pixel: PixelCoord::new(x, y), displacement: Some(d), status: TrackStatus::Tracked, residual: 0.0 }
    }

    /// Synthetic training set generated by a known in-family model.
    fn in_family_set(truth: &DisplacementRegression, stiff: &StiffnessModel, n_boundary: usize) -> TrainingSet {
        let points: Vec<(f64, f64)> = (0..7).flat_map(|i| (0..6).map(move |j| (30.0 + 50.0 * i as f64, 25.0 + 50.0 * j as f64))).collect();
        let forces: Vec<f64> = (0..8).map(|k| 2.5 * k as f64).collect();
        let tracks: Vec<Vec<TrackedPoint>> = forces
            .iter()
            .map(|&f| {
                points
                    .iter()
                    .map(|&(x, y)| {
                        let (dx, dy) = truth.eval_cumulative(x, y, f, stiff).unwrap();
                        tracked(x, y, [dx, dy])
                    })
                    .collect()
            })
            .collect();
        let obs: Vec<LevelObservation> = forces
            .iter()
            .zip(&tracks)
            .map(|(&f, t)| LevelObservation { force: f, lambda: Some(stiff.law().indentation_or_zero(f).unwrap()), tracks: t })
            .collect();
        let mut ts = build_training_set_from_levels(&obs, stiff, (400, 300), 40.0, n_boundary, 64).unwrap();
        // Replace boundary targets with in-family values so the set is exactly realisable.
        for s in ts.samples.iter_mut().filter(|s| s.kind == SampleKind::Boundary) {
            let (dx, dy) = truth.eval_cumulative(s.x, s.y, ts.levels[s.level].force, stiff).unwrap();
            s.dx = dx;
            s.dy = dy;
        }
        ts
    }

    fn truth_model() -> DisplacementRegression {
        let mut kx = [0.0; 10];
        let mut ky = [0.0; 10];
        kx[2] = 0.05;
        kx[4] = 0.3;
        kx[5] = -0.2;
        kx[8] = -0.1;
        ky[2] = 0.2;
        ky[4] = 0.05;
        ky[5] = -0.9;
        ky[8] = -0.15;
        DisplacementRegression {
            kx,
            ky,
            norms: Normalization { x_scale: 400.0, y_scale: 300.0, h_scale: 6.0, dx_scale: 40.0, dy_scale: 40.0 },
            n_force_intervals: 64,
            final_loss: 0.0,
            iterations: 0,
        }
    }

    #[test]
    fn boundary_targets_follow_layer_constraint() {
        let stiff = linear_stiffness(4.0);
        let none: Vec<TrackedPoint> = vec![];
        let obs: Vec<LevelObservation> = [0.0, 10.0, 40.0, 80.0, 160.0]
            .iter()
            .map(|&f| LevelObservation { force: f, lambda: Some(f / 4.0), tracks: &none })
            .collect();
        let ts = build_training_set_from_levels(&obs, &stiff, (400, 300), 40.0, 20, 64).unwrap();
        assert_eq!(ts.samples.len(), 5 * 20);
        assert_eq!(ts.flow_count(), 0);
        assert_eq!(ts.bottom_target(0), 0.0);
        assert_eq!(ts.bottom_target(4), -300.0);
        let bottoms: Vec<_> = ts.samples.iter().filter(|s| s.level == 2 && s.y == 300.0).collect();
        assert_eq!(bottoms.len(), 10);
        assert!(bottoms.iter().all(|s| s.dy == -75.0 && s.dx == 0.0));
        assert_eq!(bottoms.first().unwrap().x, 1.0);
        assert_eq!(bottoms.last().unwrap().x, 400.0);
        // boundary-only sets still fit
        fit_regression(&ts, &FitOptions::default()).unwrap();
    }

    #[test]
    fn missing_lambda_and_too_few_levels() {
        let none: Vec<TrackedPoint> = vec![];
        let stiff = linear_stiffness(4.0);
        let mut obs: Vec<LevelObservation> = (0..5).map(|k| LevelObservation { force: k as f64, lambda: Some(0.0), tracks: &none }).collect();
        obs[3].lambda = None;
        assert!(build_training_set_from_levels(&obs, &stiff, (400, 300), 40.0, 4, 64).is_err());
        obs.truncate(4);
        obs[3].lambda = Some(1.0);
        assert!(build_training_set_from_levels(&obs, &stiff, (400, 300), 40.0, 4, 64).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let stiff = StiffnessModel::from_law(ForceLaw::new(0.01, 3.0, 0.2), 8.0);
        let ts = in_family_set(&truth_model(), &stiff, 16);
        let loss = QuadraticLoss::new(&ts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let kx = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let ky = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let (gx, gy) = loss.gradient(&kx, &ky);
            let to_reg = |kx: &Vector4<f64>, ky: &Vector4<f64>| loss.model(kx, ky, 0.0, 0);
            for axis in 0..2 {
                for j in 0..4 {
                    let h = 1e-6;
                    let (mut a, mut b) = ((kx, ky), (kx, ky));
                    if axis == 0 {
                        a.0[j] += h;
                        b.0[j] -= h;
                    } else {
                        a.1[j] += h;
                        b.1[j] -= h;
                    }
                    let fa = training_loss(&to_reg(&a.0, &a.1), &ts).unwrap();
                    let fb = training_loss(&to_reg(&b.0, &b.1), &ts).unwrap();
                    let numeric = (fa - fb) / (2.0 * h);
                    let analytic = if axis == 0 { gx[j] } else { gy[j] };
                    let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
                    assert!(rel < 1e-4, "axis {axis} j {j}: {numeric} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn adam_reproduces_in_family_predictions() {
        let stiff = StiffnessModel::from_law(ForceLaw::new(0.0, 3.0, 0.0), 8.0);
        let truth = truth_model();
        let ts = in_family_set(&truth, &stiff, 32);
        let fit = fit_regression(&ts, &FitOptions::default()).unwrap();
        let exact = QuadraticLoss::new(&ts).unwrap().solve_closed_form().unwrap();
        let mut worst: f64 = 0.0;
        let mut worst_cf: f64 = 0.0;
        for s in &ts.samples {
            let f = ts.levels[s.level].force;
            let p = fit.eval_cumulative(s.x, s.y, f, &stiff).unwrap();
            let c = exact.eval_cumulative(s.x, s.y, f, &stiff).unwrap();
            worst = worst.max((p.0 - s.dx).abs()).max((p.1 - s.dy).abs());
            worst_cf = worst_cf.max((c.0 - s.dx).abs()).max((c.1 - s.dy).abs());
        }
        assert!(worst_cf < 1e-9, "closed form {worst_cf}");
        assert!(worst < 1e-3, "adam worst residual {worst} px after {} iterations", fit.iterations);
        assert_eq!(fit.kx[0], 0.0);
        assert_eq!(fit.ky[9], 0.0);
    }

    #[test]
    fn fit_is_deterministic() {
        let stiff = StiffnessModel::from_law(ForceLaw::new(0.01, 3.0, 0.2), 8.0);
        let ts = in_family_set(&truth_model(), &stiff, 16);
        let opts = FitOptions { seed: 3, max_iters: 2000, ..FitOptions::default() };
        assert_eq!(fit_regression(&ts, &opts).unwrap(), fit_regression(&ts, &opts).unwrap());
    }

    #[test]
    fn divergence_reports_trace() {
        let stiff = linear_stiffness(3.0);
        let mut ts = in_family_set(&truth_model(), &stiff, 8);
        ts.samples[0].dx = f64::INFINITY;
        let err = fit_regression(&ts, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn scaled_targets_scale_predictions(alpha in 0.01f64..100.0) {
            let stiff = StiffnessModel::from_law(ForceLaw::new(0.01, 3.0, 0.2), 8.0);
            let ts = in_family_set(&truth_model(), &stiff, 16);
            let mut scaled = ts.clone();
            for s in &mut scaled.samples {
                s.dx *= alpha;
                s.dy *= alpha;
            }
            let opts = FitOptions { max_iters: 3000, ..FitOptions::default() };
            let a = fit_regression(&ts, &opts).unwrap();
            let b = fit_regression(&scaled, &opts).unwrap();
            for s in ts.samples.iter().step_by(7) {
                let f = ts.levels[s.level].force;
                let pa = a.eval_cumulative(s.x, s.y, f, &stiff).unwrap();
                let pb = b.eval_cumulative(s.x, s.y, f, &stiff).unwrap();
                prop_assert!((pb.0 / alpha - pa.0).abs() < 1e-6 && (pb.1 / alpha - pa.1).abs() < 1e-6);
            }
        }

        #[test]
        fn cumulative_is_lipschitz_in_force(f in 0.0f64..20.0) {
            let r = truth_model();
            let stiff = StiffnessModel::from_law(ForceLaw::new(0.07, 0.5, 0.5), 12.0);
            let a = r.eval_cumulative(150.0, 200.0, f, &stiff).unwrap();
            let b = r.eval_cumulative(150.0, 200.0, f + 1e-4, &stiff).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-2 && (a.1 - b.1).abs() < 1e-2);
        }
    }
}
