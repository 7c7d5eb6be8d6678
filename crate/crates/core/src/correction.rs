//! Dense deformation fields, their inversion, and frame resampling.
//!
//! A [`DeformationField`] is sampled on the reference (zero-force) grid and
//! maps reference positions to deformed ones: content at `q` in the reference
//! frame appears at `q + d(q)` in the deformed frame. The zero-compression
//! estimate is therefore the pull-back `corrected(q) = deformed(q + d(q))`.

use image::GrayImage;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::FloatImage;
use crate::io::{Frame, SweepRecording};
use crate::propagation::{Binding, BoundEvaluator, CorrectionModel, LambdaSource};

pub const INVERSE_MAX_ITERS: usize = 20;
pub const INVERSE_TOLERANCE: f64 = 0.01;
/// Largest fraction of pixels allowed to miss the inversion tolerance.
pub const INVERSE_FAILURE_FRACTION: f64 = 0.01;

/// Solves `q + d(q) = p` by fixed-point iteration `q ← p − d(q)` starting at
/// `q = p`. Returns the last iterate and whether the final step was below `tol`.
#[inline]
pub fn fixed_point_inverse(d: impl Fn(f64, f64) -> (f64, f64), p: (f64, f64), max_iters: usize, tol: f64) -> ((f64, f64), bool) {
    let mut q = p;
    for _ in 0..max_iters {
        let (dx, dy) = d(q.0, q.1);
        let next = (p.0 - dx, p.1 - dy);
        let step = ((next.0 - q.0).powi(2) + (next.1 - q.1).powi(2)).sqrt();
        q = next;
        if step < tol {
            return (q, true);
        }
    }
    (q, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// Contact force the field was evaluated at, N.
    pub force: f64,
    /// Dynamic stiffness at that force, N/mm.
    pub stiffness: f64,
}

impl DeformationField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
            force: 0.0,
            stiffness: 0.0,
        }
    }

    /// Evaluates `f(x, y)` at every pixel, rows in parallel.
    pub fn from_fn(width: usize, height: usize, exec: Exec, f: impl Fn(f64, f64) -> (f64, f64) + Sync + Send) -> Self {
        let rows = exec.map_range(height, |y| {
            (0..width).map(|x| f(x as f64, y as f64)).collect::<Vec<_>>()
        });
        let mut dx = Vec::with_capacity(width * height);
        let mut dy = Vec::with_capacity(width * height);
        for row in rows {
            for (a, b) in row {
                dx.push(a);
                dy.push(b);
            }
        }
        Self { width, height, dx, dy, force: 0.0, stiffness: 0.0 }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    /// Bilinear interpolation with edge replication.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |v: &Vec<f64>| {
            let a = v[y0 * self.width + x0];
            let b = v[y0 * self.width + x1];
            let c = v[y1 * self.width + x0];
            let d = v[y1 * self.width + x1];
            (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
        };
        (lerp(&self.dx), lerp(&self.dy))
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    /// RMS of the top row displacement magnitude, pixels.
    pub fn top_row_rms(&self) -> f64 {
        let s: f64 = (0..self.width).map(|x| {
            let (a, b) = self.at(x, 0);
            a * a + b * b
        }).sum();
        (s / self.width as f64).sqrt()
    }

    /// RMS difference against another field over `mask` (all pixels if `None`).
    pub fn rms_difference(&self, other: &DeformationField, mask: Option<&[bool]>) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let (mut acc, mut n) = (0.0, 0usize);
        for i in 0..self.dx.len() {
            if mask.is_none_or(|m| m[i]) {
                acc += (self.dx[i] - other.dx[i]).powi(2) + (self.dy[i] - other.dy[i]).powi(2);
                n += 1;
            }
        }
        if n == 0 { 0.0 } else { (acc / n as f64).sqrt() }
    }

    /// The inverse map sampled on the deformed grid: `p ↦ q(p) − p`.
    pub fn inverse(&self, exec: Exec) -> Result<DeformationField> {
        let (w, h) = self.dims();
        let rows = exec.map_range(h, |y| {
            (0..w)
                .map(|x| {
                    let p = (x as f64, y as f64);
                    let (q, ok) = fixed_point_inverse(|a, b| self.sample(a, b), p, INVERSE_MAX_ITERS, INVERSE_TOLERANCE);
                    (q.0 - p.0, q.1 - p.1, ok)
                })
                .collect::<Vec<_>>()
        });
        let mut out = DeformationField::zeros(w, h);
        out.force = self.force;
        out.stiffness = self.stiffness;
        let mut failed = 0usize;
        for (y, row) in rows.into_iter().enumerate() {
            for (x, (a, b, ok)) in row.into_iter().enumerate() {
                out.dx[y * w + x] = a;
                out.dy[y * w + x] = b;
                failed += usize::from(!ok);
            }
        }
        if failed as f64 > INVERSE_FAILURE_FRACTION * (w * h) as f64 {
            return Err(Error::Numerical(format!(
                "field inversion did not converge at {failed} of {} pixels",
                w * h
            )));
        }
        Ok(out)
    }
}

/// Dense field of a bound evaluator at contact force `force`.
pub fn field_from_model(evaluator: &BoundEvaluator, force: f64, dims: (usize, usize), exec: Exec) -> Result<DeformationField> {
    let h = evaluator.load(force)?;
    let reg = &evaluator.regression;
    let (hn, clamped) = reg.load_normalized(h);
    if clamped {
        log::warn!("load {h:.3} mm at {force} N is outside the trained range; clamped");
    }
    let mut field = DeformationField::from_fn(dims.0, dims.1, exec, |x, y| reg.eval_load_normalized(x, y, hn));
    field.force = force;
    let law = evaluator.stiffness.law();
    field.stiffness = if force > law.c3 { law.stiffness_at_force(force)? } else { law.dynamic_stiffness(0.0) };
    if !field.is_finite() {
        return Err(Error::Numerical("deformation field is not finite".into()));
    }
    Ok(field)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corrected {
    pub image: FloatImage,
    /// `true` where the pull-back sample fell inside the deformed frame.
    pub valid: Vec<bool>,
}

impl Corrected {
    pub fn mask_image(&self) -> GrayImage {
        let raw = self.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.image.width as u32, self.image.height as u32, raw).expect("buffer size")
    }
}

/// Resamples a deformed frame onto the reference grid.
///
/// `input_valid` optionally marks usable pixels of the deformed frame; a
/// sample is valid only if its nearest input pixel is.
pub fn invert_and_resample(deformed: &FloatImage, field: &DeformationField, input_valid: Option<&[bool]>, exec: Exec) -> Result<Corrected> {
    if deformed.dims() != field.dims() {
        return Err(Error::Invalid(format!(
            "field {:?} does not match image {:?}",
            field.dims(),
            deformed.dims()
        )));
    }
    let (w, h) = deformed.dims();
    let rows = exec.map_range(h, |y| {
        (0..w)
            .map(|x| {
                let (dx, dy) = field.at(x, y);
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                match deformed.bilinear(sx, sy) {
                    Some(v) => {
                        let ok = input_valid.is_none_or(|m| m[sy.round() as usize * w + sx.round() as usize]);
                        if ok { (v, true) } else { (0.0, false) }
                    }
                    None => (0.0, false),
                }
            })
            .collect::<Vec<_>>()
    });
    let mut image = FloatImage::new(w, h);
    let mut valid = vec![false; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (v, ok)) in row.into_iter().enumerate() {
            image.data[y * w + x] = v;
            valid[y * w + x] = ok;
        }
    }
    Ok(Corrected { image, valid })
}

/// Synthesises a deformed frame from a reference frame (forward warp via the
/// inverse field). Used to test correction round trips.
pub fn warp_forward(reference: &FloatImage, field: &DeformationField, exec: Exec) -> Result<FloatImage> {
    let inv = field.inverse(exec)?;
    let (w, h) = reference.dims();
    let mut out = FloatImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (a, b) = inv.at(x, y);
            out.set(x, y, reference.bilinear_clamped(x as f64 + a, y as f64 + b));
        }
    }
    Ok(out)
}

/// Corrects one frame with `evaluator`; the pose is moved back by `lambda`
/// along the beam so the frame sits where the uncompressed tissue was imaged.
pub fn correct_frame(frame: &Frame, evaluator: &BoundEvaluator, lambda: f64, exec: Exec) -> Result<Frame> {
    let img = frame.float_image();
    let field = field_from_model(evaluator, frame.force, img.dims(), exec)?;
    let input = frame.valid_mask();
    let corrected = invert_and_resample(&img, &field, input.as_deref(), exec)?;
    let mut pose = frame.pose;
    pose.translation -= pose.beam_axis() * lambda;
    Ok(Frame {
        timestamp: frame.timestamp,
        image: corrected.image.to_gray(),
        force: frame.force,
        pose,
        mask: Some(corrected.mask_image()),
    })
}

/// Corrects every frame of a sweep using the model's atlas.
pub fn correct_sweep(rec: &SweepRecording, model: &CorrectionModel, binding: Binding, exec: Exec) -> Result<SweepRecording> {
    let acq = &rec.manifest.acquisition;
    let mut frames = Vec::with_capacity(rec.frames.len());
    for f in &rec.frames {
        let s = acq.arc_position(&f.pose).clamp(0.0, model.atlas.length_mm);
        let ev = model.evaluator_at(s, binding)?;
        let lambda = match model.lambda_source {
            LambdaSource::Pose => acq.pose_indentation(&f.pose),
            LambdaSource::Force => ev.stiffness.law().indentation_or_zero(f.force)?,
        };
        frames.push(correct_frame(f, &ev, lambda, exec)?);
    }
    let mut out = SweepRecording { manifest: rec.manifest.clone(), frames };
    out.manifest.acquisition.corrected = true;
    Ok(out)
}
