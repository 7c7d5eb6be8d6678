//! Synthetic phantom: speckle texture, dark-lumen vessel, quasi-static
//! contact mechanics and an analytic in-plane deformation field.
//!
//! Images are formed in material coordinates: a deformed-frame pixel `p` is
//! pulled back to its reference position `q` (with `q + u(q) = p`) and the
//! texture and lumen are evaluated there. The field `u` is an exponential
//! depth decay plus a Gaussian-derivative lateral bulge; it is deliberately
//! not a member of the quadratic family the regression fits.

use image::GrayImage;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationParams, Pose};
use crate::correction::fixed_point_inverse;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::{quantize, FloatImage};
use crate::io::{Acquisition, Frame, RecordingKind, SweepRecording};
use crate::stiffness::ForceLaw;

/// Texture grid pitch, mm.
const TEXTURE_PITCH: f64 = 0.1;
/// Speckle correlation length in texture cells.
const SPECKLE_SIGMA: f64 = 1.2;
const TISSUE_LEVEL: f64 = 100.0;
const LUMEN_LEVEL: f64 = 0.1;
/// Width of the lumen wall transition, mm.
const LUMEN_EDGE: f64 = 0.15;
const RENDER_ITERS: usize = 60;
const RENDER_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase", deny_unknown_fields)]
pub enum StiffnessProfile {
    Constant { law: ForceLaw },
    /// Coefficients interpolated linearly from `start` (s = 0) to `end` (s = path length).
    Linear { start: ForceLaw, end: ForceLaw },
}

impl StiffnessProfile {
    /// Linear profile spanning `base` scaled by `lo` .. `hi` (c3 unscaled).
    pub fn linear_scaled(base: ForceLaw, lo: f64, hi: f64) -> Self {
        StiffnessProfile::Linear {
            start: base.scaled(lo),
            end: base.scaled(hi),
        }
    }

    pub fn law_at(&self, s: f64, length: f64) -> ForceLaw {
        match self {
            StiffnessProfile::Constant { law } => *law,
            StiffnessProfile::Linear { start, end } => {
                let t = if length > 0.0 { (s / length).clamp(0.0, 1.0) } else { 0.0 };
                start.lerp(end, t)
            }
        }
    }

    fn laws(&self) -> Vec<ForceLaw> {
        match self {
            StiffnessProfile::Constant { law } => vec![*law],
            StiffnessProfile::Linear { start, end } => vec![*start, *end],
        }
    }
}

/// Straight vessel; centre given in material (lateral, depth) coordinates, mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselSpec {
    pub radius_mm: f64,
    /// Centre depth at s = 0.
    pub depth_mm: f64,
    /// Centre lateral offset from the probe axis at s = 0.
    pub lateral_mm: f64,
    #[serde(default)]
    pub depth_slope: f64,
    #[serde(default)]
    pub lateral_slope: f64,
}

impl VesselSpec {
    pub fn center(&self, s: f64) -> (f64, f64) {
        (self.lateral_mm + self.lateral_slope * s, self.depth_mm + self.depth_slope * s)
    }

    /// Cross-section area in a plane of constant elevation, mm².
    pub fn cross_section_area(&self) -> f64 {
        let stretch = (1.0 + self.depth_slope.powi(2) + self.lateral_slope.powi(2)).sqrt();
        std::f64::consts::PI * self.radius_mm.powi(2) * stretch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub id: String,
    pub calibration: CalibrationParams,
    pub stiffness: StiffnessProfile,
    pub vessel: VesselSpec,
    /// Trajectory length, mm.
    pub path_length_mm: f64,
    /// Flexible layer thickness `L_T`, mm.
    pub layer_thickness_mm: f64,
    /// Depth scale of the exponential compression decay, mm.
    pub decay_depth_mm: f64,
    /// Lateral bulge relative to the axial amplitude.
    pub incompressibility: f64,
    /// Multiplicative speckle contrast in [0, 1].
    pub speckle_contrast: f64,
    /// Additive image noise σ, gray levels.
    pub image_noise: f64,
    /// Force sensor noise σ, N.
    pub force_noise: f64,
    pub texture_seed: u64,
    pub frame_rate_hz: f64,
}

impl PhantomSpec {
    /// Gelatin-like stiff phantom: ~3.2 N/mm, nearly linear, large vessel.
    pub fn stiff() -> Self {
        let base = ForceLaw::new(0.00982627610692868, 3.1466473677836984, 0.5);
        Self {
            id: "stiff".into(),
            calibration: CalibrationParams::default(),
            stiffness: StiffnessProfile::linear_scaled(base, 0.95, 1.05),
            vessel: VesselSpec {
                radius_mm: (224.0 / std::f64::consts::PI).sqrt(),
                depth_mm: 20.0,
                lateral_mm: 0.0,
                depth_slope: 0.0,
                lateral_slope: 0.0,
            },
            path_length_mm: 40.0,
            layer_thickness_mm: 40.0,
            decay_depth_mm: 240.0,
            incompressibility: 0.04,
            speckle_contrast: 0.8,
            image_noise: 1.0,
            force_noise: 0.1,
            texture_seed: 11,
            frame_rate_hz: 50.0,
        }
    }

    /// Commercial-like soft phantom: ~1.5 N/mm, strongly nonlinear, small vessel.
    pub fn soft() -> Self {
        let base = ForceLaw::new(0.07080779235356797, 0.5, 0.5);
        Self {
            id: "soft".into(),
            stiffness: StiffnessProfile::linear_scaled(base, 0.85, 1.15),
            vessel: VesselSpec {
                radius_mm: (57.0 / std::f64::consts::PI).sqrt(),
                depth_mm: 15.0,
                lateral_mm: 0.0,
                depth_slope: 0.0,
                lateral_slope: 0.0,
            },
            path_length_mm: 60.0,
            texture_seed: 23,
            ..Self::stiff()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "stiff" => Ok(Self::stiff()),
            "soft" => Ok(Self::soft()),
            other => Err(Error::Invalid(format!("unknown phantom preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        for law in self.stiffness.laws() {
            if !(law.c1 >= 0.0 && law.c2 > 0.0 && law.c3 >= 0.0) {
                return Err(Error::Invalid(format!(
                    "phantom force law needs c1 >= 0, c2 > 0, c3 >= 0: {law:?}"
                )));
            }
        }
        let positive = [
            ("vessel radius", self.vessel.radius_mm),
            ("layer thickness", self.layer_thickness_mm),
            ("decay depth", self.decay_depth_mm),
            ("frame rate", self.frame_rate_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be > 0")));
            }
        }
        let non_negative = [
            ("path length", self.path_length_mm),
            ("incompressibility", self.incompressibility),
            ("image noise", self.image_noise),
            ("force noise", self.force_noise),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.speckle_contrast) {
            return Err(Error::Invalid("speckle contrast must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn law_at(&self, s: f64) -> ForceLaw {
        self.stiffness.law_at(s, self.path_length_mm)
    }

    fn check_position(&self, s: f64) -> Result<()> {
        if !(s >= 0.0 && s <= self.path_length_mm) {
            return Err(Error::Domain(format!(
                "position {s} mm outside phantom trajectory [0, {}]",
                self.path_length_mm
            )));
        }
        Ok(())
    }

    pub fn acquisition(&self) -> Acquisition {
        Acquisition {
            frame_rate_hz: self.frame_rate_hz,
            trajectory_origin: [0.0, 0.0, 0.0],
            trajectory_direction: [0.0, 1.0, 0.0],
            path_length_mm: self.path_length_mm,
            position_mm: None,
            force_setpoint_n: None,
            seed: None,
            corrected: false,
        }
    }

    /// Forward field at indentation `lambda`.
    pub fn forward(&self, lambda: f64) -> ForwardDeformation {
        ForwardDeformation {
            indentation_mm: lambda,
            layer_thickness_mm: self.layer_thickness_mm,
            decay_depth_mm: self.decay_depth_mm,
            incompressibility: self.incompressibility,
            lateral_px: self.calibration.lateral_px as f64,
            axial_px: self.calibration.axial_px as f64,
            depth_mm: self.calibration.depth_mm,
        }
    }
}

/// Reference → deformed displacement of image content, pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardDeformation {
    pub indentation_mm: f64,
    pub layer_thickness_mm: f64,
    pub decay_depth_mm: f64,
    pub incompressibility: f64,
    pub lateral_px: f64,
    pub axial_px: f64,
    pub depth_mm: f64,
}

impl ForwardDeformation {
    /// Upward shift of the image bottom, `(λ / L_T)·W_I` pixels.
    pub fn bottom_shift(&self) -> f64 {
        self.indentation_mm / self.layer_thickness_mm * self.axial_px
    }

    /// Normalised depth profile, 0 at the transducer face and 1 at the image
    /// bottom; held at 1 below the image.
    pub fn depth_profile(&self, y: f64) -> f64 {
        let t = (y / self.axial_px).clamp(0.0, 1.0);
        let dn = self.decay_depth_mm / self.depth_mm;
        (1.0 - (-t / dn).exp()) / (1.0 - (-1.0 / dn).exp())
    }

    /// Displacement `(u_x, u_y)` of reference pixel `(x, y)`.
    #[inline]
    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        if self.indentation_mm == 0.0 {
            return (0.0, 0.0);
        }
        let a = self.bottom_shift();
        let uy = -a * self.depth_profile(y);
        let t = (y / self.axial_px).clamp(0.0, 1.0);
        let w = 0.6 * self.lateral_px;
        let xi = (x - 0.5 * self.lateral_px) / w;
        let ux = self.incompressibility * a * (std::f64::consts::PI * t).sin() * xi * (-0.5 * xi * xi).exp();
        (ux, uy)
    }

    /// Tissue displacement along the beam in the world frame, mm, for the
    /// material originally at reference row `y`. Decays from `λ` at the
    /// surface to 0 at depth `L_T`.
    pub fn world_axial_displacement(&self, y: f64) -> f64 {
        let (_, uy) = self.displacement(0.5 * self.lateral_px, y);
        self.indentation_mm + uy * self.depth_mm / self.axial_px
    }
}

/// Band-limited Rayleigh speckle on a regular (lateral, depth) mm grid.
#[derive(Clone, Debug)]
pub struct Texture {
    grid: FloatImage,
    u0: f64,
    z0: f64,
}

impl Texture {
    pub fn generate(cal: &CalibrationParams, seed: u64) -> Self {
        let half = cal.element_length_mm / 2.0 + 5.0;
        let (u0, z0) = (-half, -2.0);
        let w = ((2.0 * half) / TEXTURE_PITCH).ceil() as usize + 1;
        let h = ((cal.depth_mm + 27.0) / TEXTURE_PITCH).ceil() as usize + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut re = FloatImage::new(w, h);
        let mut im = FloatImage::new(w, h);
        for i in 0..w * h {
            re.data[i] = rng.sample::<f64, _>(StandardNormal) as f32;
            im.data[i] = rng.sample::<f64, _>(StandardNormal) as f32;
        }
        let re = re.gaussian_blur(SPECKLE_SIGMA);
        let im = im.gaussian_blur(SPECKLE_SIGMA);
        let mut grid = FloatImage::new(w, h);
        for i in 0..w * h {
            grid.data[i] = (re.data[i].powi(2) + im.data[i].powi(2)).sqrt();
        }
        let mean = grid.mean() as f32;
        grid.data.iter_mut().for_each(|v| *v /= mean);
        Self { grid, u0, z0 }
    }

    /// Envelope at material position (mm); mean 1.
    #[inline]
    pub fn sample(&self, u: f64, z: f64) -> f64 {
        self.grid
            .bilinear_clamped((u - self.u0) / TEXTURE_PITCH, (z - self.z0) / TEXTURE_PITCH) as f64
    }
}

/// A phantom with its texture realised.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    texture: Texture,
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_PALPATION: u64 = 1;
const STREAM_SWEEP: u64 = 2;
const STREAM_FORCE: u64 = 3;

impl Phantom {
    pub fn new(spec: PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let texture = Texture::generate(&spec.calibration, spec.texture_seed);
        Ok(Self { spec, texture })
    }

    /// Lumen attenuation at material position: 1 in tissue, `LUMEN_LEVEL` inside.
    fn lumen_factor(&self, s: f64, u: f64, z: f64) -> f64 {
        let (cu, cz) = self.spec.vessel.center(s);
        let d = ((u - cu).powi(2) + (z - cz).powi(2)).sqrt();
        let r = self.spec.vessel.radius_mm;
        let t = ((d - (r - 0.5 * LUMEN_EDGE)) / LUMEN_EDGE).clamp(0.0, 1.0);
        let smooth = t * t * (3.0 - 2.0 * t);
        LUMEN_LEVEL + (1.0 - LUMEN_LEVEL) * smooth
    }

    /// Noise-free intensity of the reference (zero-force) image at sub-pixel `(x, y)`.
    pub fn reference_intensity(&self, s: f64, x: f64, y: f64) -> f64 {
        let cal = &self.spec.calibration;
        let u = cal.lateral_scale() * x - cal.element_length_mm / 2.0;
        let z = cal.axial_scale() * y + cal.offset_mm;
        let speckle = 1.0 + self.spec.speckle_contrast * (self.texture.sample(u, z) - 1.0);
        TISSUE_LEVEL * speckle * self.lumen_factor(s, u, z)
    }

    /// Renders the frame seen at arc position `s` with indentation `lambda`.
    pub fn render(&self, s: f64, lambda: f64, noise_seed: u64, exec: Exec) -> Result<GrayImage> {
        let cal = &self.spec.calibration;
        let (w, h) = (cal.lateral_px as usize, cal.axial_px as usize);
        let field = self.spec.forward(lambda);
        let sigma = self.spec.image_noise;
        let mut data = vec![0u8; w * h];
        let failures = std::sync::atomic::AtomicUsize::new(0);
        exec.for_each_row(&mut data, w, |y, row| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            rng.set_stream(y as u64);
            for (x, out) in row.iter_mut().enumerate() {
                let p = (x as f64, y as f64);
                let (q, ok) = fixed_point_inverse(|a, b| field.displacement(a, b), p, RENDER_ITERS, RENDER_TOL);
                if !ok {
                    failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                let mut v = self.reference_intensity(s, q.0, q.1);
                if sigma > 0.0 {
                    v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                *out = quantize(v as f32);
            }
        });
        let failures = failures.into_inner();
        if failures > 0 {
            return Err(Error::Numerical(format!(
                "forward field not invertible at {failures} pixels (indentation {lambda} mm)"
            )));
        }
        Ok(GrayImage::from_raw(w as u32, h as u32, data).expect("buffer size"))
    }

    fn probe_pose(&self, s: f64, lambda: f64) -> Pose {
        let acq = self.spec.acquisition();
        Pose::from_translation(acq.origin() + acq.direction() * s + Vector3::new(0.0, 0.0, lambda))
    }

    fn measured_force(&self, truth: f64, rng: &mut ChaCha8Rng) -> f64 {
        let sigma = self.spec.force_noise;
        let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        (truth + noise).max(0.0)
    }

    /// True contact forces of a palpation ramp: 0, then from contact onset
    /// (`c3`) linearly up to `f_max`.
    pub fn palpation_forces(law: &ForceLaw, f_max: f64, n_steps: usize) -> Vec<f64> {
        let onset = law.c3.min(f_max);
        (0..n_steps)
            .map(|k| match k {
                0 => 0.0,
                _ => onset + (f_max - onset) * (k - 1) as f64 / (n_steps - 2) as f64,
            })
            .collect()
    }

    pub fn palpation(&self, position: f64, f_max: f64, n_steps: usize, seed: u64, exec: Exec) -> Result<SweepRecording> {
        self.spec.check_position(position)?;
        if !(f_max.is_finite() && f_max >= 0.0) {
            return Err(Error::Invalid(format!("palpation force {f_max} N must be >= 0")));
        }
        if n_steps < 10 {
            return Err(Error::Invalid(format!("palpation needs >= 10 steps, got {n_steps}")));
        }
        let law = self.spec.law_at(position);
        let forces = Self::palpation_forces(&law, f_max, n_steps);
        let mut force_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_FORCE, 0));
        let mut frames = Vec::with_capacity(n_steps);
        for (k, &f) in forces.iter().enumerate() {
            let lambda = law.indentation_or_zero(f)?;
            let image = self.render(position, lambda, mix_seed(seed, STREAM_PALPATION, k as u64), exec)?;
            frames.push(Frame {
                timestamp: k as f64 / self.spec.frame_rate_hz,
                image,
                force: self.measured_force(f, &mut force_rng),
                pose: self.probe_pose(position, lambda),
                mask: None,
            });
        }
        let mut acq = self.spec.acquisition();
        acq.position_mm = Some(position);
        acq.seed = Some(seed);
        Ok(SweepRecording::new(
            self.spec.id.clone(),
            RecordingKind::Palpation,
            self.spec.calibration,
            acq,
            frames,
        ))
    }

    pub fn sweep(&self, f_c: f64, path_length: f64, n_frames: usize, seed: u64, exec: Exec) -> Result<SweepRecording> {
        if !(f_c.is_finite() && f_c >= 0.0) {
            return Err(Error::Invalid(format!("sweep force {f_c} N must be >= 0")));
        }
        if n_frames < 2 {
            return Err(Error::Invalid("sweep needs at least 2 frames".into()));
        }
        self.spec.check_position(path_length)?;
        let mut force_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_FORCE, 1));
        let mut frames = Vec::with_capacity(n_frames);
        for k in 0..n_frames {
            let s = path_length * k as f64 / (n_frames - 1) as f64;
            let lambda = self.spec.law_at(s).indentation_or_zero(f_c)?;
            let image = self.render(s, lambda, mix_seed(seed, STREAM_SWEEP, k as u64), exec)?;
            let force = if f_c == 0.0 { 0.0 } else { self.measured_force(f_c, &mut force_rng) };
            frames.push(Frame {
                timestamp: k as f64 / self.spec.frame_rate_hz,
                image,
                force,
                pose: self.probe_pose(s, lambda),
                mask: None,
            });
        }
        let mut acq = self.spec.acquisition();
        acq.path_length_mm = path_length;
        acq.force_setpoint_n = Some(f_c);
        acq.seed = Some(seed);
        Ok(SweepRecording::new(
            self.spec.id.clone(),
            RecordingKind::Sweep,
            self.spec.calibration,
            acq,
            frames,
        ))
    }

    /// Ground-truth lumen mask of the zero-force frame at `s`.
    pub fn reference_lumen(&self, s: f64) -> Vec<bool> {
        let cal = &self.spec.calibration;
        let (w, h) = (cal.lateral_px as usize, cal.axial_px as usize);
        let (cu, cz) = self.spec.vessel.center(s);
        let r2 = self.spec.vessel.radius_mm.powi(2);
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let u = cal.lateral_scale() * x - cal.element_length_mm / 2.0;
                let z = cal.axial_scale() * y + cal.offset_mm;
                (u - cu).powi(2) + (z - cz).powi(2) <= r2
            })
            .collect()
    }
}

pub fn simulate_palpation(spec: &PhantomSpec, position: f64, f_max: f64, n_steps: usize, seed: u64) -> Result<SweepRecording> {
    Phantom::new(spec.clone())?.palpation(position, f_max, n_steps, seed, Exec::default())
}

pub fn simulate_sweep(spec: &PhantomSpec, f_c: f64, path_length: f64, n_frames: usize, seed: u64) -> Result<SweepRecording> {
    Phantom::new(spec.clone())?.sweep(f_c, path_length, n_frames, seed, Exec::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stiffness::{fit_stiffness, palpation_samples, stiffness_stats};

    fn small_spec() -> PhantomSpec {
        let mut s = PhantomSpec::stiff();
        s.calibration = CalibrationParams {
            lateral_px: 120,
            axial_px: 90,
            ..CalibrationParams::default()
        };
        s
    }

    #[test]
    fn forward_field_boundaries() {
        let spec = PhantomSpec::stiff();
        let f = spec.forward(4.0);
        assert_eq!(f.bottom_shift(), 30.0);
        let top = f.displacement(120.0, 0.0);
        assert_eq!(top, (0.0, 0.0));
        let bottom = f.displacement(123.0, 300.0);
        assert!((bottom.1 + 30.0).abs() < 1e-12);
        assert!(bottom.0.abs() < 1e-12);
        let zero = spec.forward(0.0);
        assert_eq!(zero.displacement(10.0, 50.0), (0.0, 0.0));
    }

    #[test]
    fn world_displacement_decays_with_depth() {
        let f = PhantomSpec::stiff().forward(6.0);
        let mut prev = f64::INFINITY;
        for y in (0..=300).step_by(10) {
            let d = f.world_axial_displacement(y as f64);
            assert!(d < prev || y == 0);
            prev = d;
        }
        assert!((f.world_axial_displacement(0.0) - 6.0).abs() < 1e-12);
        assert!(f.world_axial_displacement(300.0).abs() < 1e-9);
    }

    #[test]
    fn field_is_outside_quadratic_family() {
        // Second differences of u_y along depth are not constant.
        let f = PhantomSpec::stiff().forward(5.0);
        let d2 = |y: f64| {
            let g = |y| f.displacement(200.0, y).1;
            g(y + 10.0) - 2.0 * g(y) + g(y - 10.0)
        };
        assert!((d2(20.0) - d2(280.0)).abs() > 1e-3);
    }

    #[test]
    fn zero_force_palpation_repeats_template() {
        let mut spec = small_spec();
        spec.image_noise = 0.0;
        let ph = Phantom::new(spec).unwrap();
        let rec = ph.palpation(20.0, 0.0, 10, 1, Exec::Sequential).unwrap();
        for f in &rec.frames {
            assert_eq!(f.image, rec.frames[0].image);
            assert_eq!(f.pose, rec.frames[0].pose);
        }
    }

    #[test]
    fn deterministic_and_exec_independent() {
        let ph = Phantom::new(small_spec()).unwrap();
        let a = ph.sweep(15.0, 10.0, 4, 9, Exec::Sequential).unwrap();
        let b = ph.sweep(15.0, 10.0, 4, 9, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = Phantom::new(small_spec()).unwrap().sweep(15.0, 10.0, 4, 9, Exec::Parallel).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn position_outside_phantom() {
        let ph = Phantom::new(small_spec()).unwrap();
        assert!(matches!(ph.palpation(41.0, 10.0, 10, 0, Exec::Sequential), Err(Error::Domain(_))));
        assert!(matches!(ph.palpation(-1.0, 10.0, 10, 0, Exec::Sequential), Err(Error::Domain(_))));
        assert!(matches!(ph.sweep(5.0, 50.0, 10, 0, Exec::Sequential), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_free_refit_recovers_law() {
        for spec in [PhantomSpec::stiff(), PhantomSpec::soft()] {
            let mut spec = spec;
            spec.force_noise = 0.0;
            spec.calibration.lateral_px = 40;
            spec.calibration.axial_px = 30;
            let ph = Phantom::new(spec.clone()).unwrap();
            let s = spec.path_length_mm / 3.0;
            let rec = ph.palpation(s, 30.0, 20, 3, Exec::Sequential).unwrap();
            let m = fit_stiffness(&palpation_samples(&rec.frames).unwrap()).unwrap();
            let truth = spec.law_at(s);
            for (a, b) in [(m.c1, truth.c1), (m.c2, truth.c2), (m.c3, truth.c3)] {
                assert!((a - b).abs() <= 0.02 * b.abs(), "{m:?} vs {truth:?}");
            }
        }
    }

    #[test]
    fn stiff_preset_slope_statistics() {
        let mut spec = PhantomSpec::stiff();
        spec.force_noise = 0.0;
        spec.calibration.lateral_px = 40;
        spec.calibration.axial_px = 30;
        let ph = Phantom::new(spec).unwrap();
        let rec = ph.palpation(20.0, 30.0, 20, 3, Exec::Sequential).unwrap();
        let samples = palpation_samples(&rec.frames).unwrap();
        let m = fit_stiffness(&samples).unwrap();
        let lambdas: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let (mean, sd) = stiffness_stats(&m, &lambdas);
        assert!((mean * 1000.0 - 3237.0).abs() < 10.0, "{mean}");
        assert!((sd * 1000.0 - 56.0).abs() < 3.0, "{sd}");
    }

    #[test]
    fn palpation_ramp_shape() {
        let law = ForceLaw::new(0.0, 3.0, 0.5);
        let f = Phantom::palpation_forces(&law, 30.0, 20);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.5);
        assert_eq!(f[19], 30.0);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }
}
