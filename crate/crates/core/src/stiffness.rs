//! Quadratic force/indentation law and dynamic stiffness.
//!
//! Contact force is modelled as `F = c1·λ² + c2·λ + c3` with `λ` the probe
//! indentation along the beam axis (mm). Dynamic stiffness is its derivative
//! `k_d = 2·c1·λ + c2` (N/mm).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Frame;

/// Force above which the probe is considered in contact, N.
pub const CONTACT_THRESHOLD: f64 = 0.2;

pub const MIN_FIT_SAMPLES: usize = 10;

/// Coefficients of a quadratic force law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceLaw {
    /// N/mm²
    pub c1: f64,
    /// N/mm
    pub c2: f64,
    /// N
    pub c3: f64,
}

impl ForceLaw {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Self {
        Self { c1, c2, c3 }
    }

    pub fn force(&self, lambda: f64) -> f64 {
        (self.c1 * lambda + self.c2) * lambda + self.c3
    }

    pub fn dynamic_stiffness(&self, lambda: f64) -> f64 {
        2.0 * self.c1 * lambda + self.c2
    }

    /// Dynamic stiffness at the indentation that produces `force`, i.e.
    /// `sqrt(c2² + 4·c1·(F − c3))`.
    pub fn stiffness_at_force(&self, force: f64) -> Result<f64> {
        let disc = self.discriminant(force)?;
        Ok(disc.sqrt())
    }

    fn discriminant(&self, force: f64) -> Result<f64> {
        let disc = self.c2 * self.c2 + 4.0 * self.c1 * (force - self.c3);
        if disc < 0.0 || !disc.is_finite() {
            return Err(Error::Domain(format!(
                "force {force} N is beyond the monotone range of the force law"
            )));
        }
        Ok(disc)
    }

    /// Positive root of `F(λ) = force`.
    pub fn indentation_for_force(&self, force: f64) -> Result<f64> {
        if !(force >= self.c3) {
            return Err(Error::Domain(format!(
                "force {force} N is below the contact offset c3 = {} N",
                self.c3
            )));
        }
        let df = force - self.c3;
        if df == 0.0 {
            return Ok(0.0);
        }
        let disc = self.discriminant(force)?;
        // Rationalised form; no cancellation when c1 is small.
        let denom = self.c2 + disc.sqrt();
        if denom <= 0.0 {
            return Err(Error::Domain("force law has no positive root".into()));
        }
        Ok(2.0 * df / denom)
    }

    /// Indentation for `force`, zero while the force is below contact.
    pub fn indentation_or_zero(&self, force: f64) -> Result<f64> {
        if force <= self.c3 {
            Ok(0.0)
        } else {
            self.indentation_for_force(force)
        }
    }

    pub fn scaled(&self, stiffness_scale: f64) -> Self {
        Self {
            c1: self.c1 * stiffness_scale,
            c2: self.c2 * stiffness_scale,
            c3: self.c3,
        }
    }

    pub fn lerp(&self, other: &ForceLaw, t: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * t;
        Self {
            c1: l(self.c1, other.c1),
            c2: l(self.c2, other.c2),
            c3: l(self.c3, other.c3),
        }
    }
}

/// A force law fitted to palpation samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessModel {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub fit_r2: f64,
    pub sample_count: usize,
    /// Indentation range covered by the samples, mm.
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl StiffnessModel {
    /// A model built directly from known coefficients (no fit statistics).
    pub fn from_law(law: ForceLaw, lambda_max: f64) -> Self {
        Self {
            c1: law.c1,
            c2: law.c2,
            c3: law.c3,
            fit_r2: 1.0,
            sample_count: 0,
            lambda_min: 0.0,
            lambda_max,
        }
    }

    pub fn law(&self) -> ForceLaw {
        ForceLaw::new(self.c1, self.c2, self.c3)
    }

    pub fn dynamic_stiffness(&self, lambda: f64) -> f64 {
        self.law().dynamic_stiffness(lambda)
    }

    pub fn force(&self, lambda: f64) -> f64 {
        self.law().force(lambda)
    }

    pub fn indentation_for_force(&self, force: f64) -> Result<f64> {
        self.law().indentation_for_force(force)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.c1, self.c2, self.c3, self.lambda_min, self.lambda_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("stiffness model has non-finite fields".into()));
        }
        if !(0.0..=1.0).contains(&self.fit_r2) {
            return Err(Error::Invalid(format!("fit R² {} outside [0, 1]", self.fit_r2)));
        }
        if self.lambda_min > self.lambda_max {
            return Err(Error::Invalid("stiffness model lambda range is inverted".into()));
        }
        let lo = self.dynamic_stiffness(self.lambda_min);
        let hi = self.dynamic_stiffness(self.lambda_max);
        if lo <= 0.0 || hi <= 0.0 {
            return Err(Error::Numerical(format!(
                "non-physical stiffness: k_d = {lo:.4} .. {hi:.4} N/mm over the fitted range"
            )));
        }
        Ok(())
    }
}

/// Least-squares polynomial fit of `F` in `λ` of the given degree.
/// Returns coefficients ordered from the constant term up and the fit R².
pub fn polynomial_fit(samples: &[(f64, f64)], degree: usize) -> Result<(Vec<f64>, f64)> {
    if samples.len() <= degree {
        return Err(Error::Invalid(format!(
            "{} samples cannot determine a degree-{degree} fit",
            samples.len()
        )));
    }
    if samples.iter().any(|(l, f)| !(l.is_finite() && f.is_finite())) {
        return Err(Error::Invalid("non-finite palpation sample".into()));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.0), hi.max(s.0))
    });
    let span = hi - lo;
    if span <= 1e-9 * (1.0 + hi.abs()) {
        return Err(Error::Numerical(
            "degenerate design matrix: all indentations are equal".into(),
        ));
    }
    // Fit in a centred, scaled variable for conditioning, then expand.
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * span;
    let n = samples.len();
    let a = DMatrix::from_fn(n, degree + 1, |r, c| ((samples[r].0 - mid) / half).powi(c as i32));
    let b = DVector::from_iterator(n, samples.iter().map(|s| s.1));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax {
        return Err(Error::Numerical("degenerate design matrix".into()));
    }
    let u = svd.solve(&b, 0.0).map_err(|e| Error::Numerical(e.to_string()))?;

    // p(λ) = Σ u_k ((λ - mid)/half)^k expanded in powers of λ.
    let mut coeffs = vec![0.0; degree + 1];
    for (k, uk) in u.iter().enumerate() {
        let scale = uk / half.powi(k as i32);
        for (j, c) in coeffs.iter_mut().enumerate().take(k + 1) {
            *c += scale * binomial(k, j) * (-mid).powi((k - j) as i32);
        }
    }

    let fitted = &a * &u;
    let mean = b.mean();
    let ss_res: f64 = (&b - &fitted).iter().map(|r| r * r).sum();
    let ss_tot: f64 = b.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    Ok((coeffs, r2))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Fits the quadratic force law to `(λ mm, F N)` samples.
pub fn fit_stiffness(samples: &[(f64, f64)]) -> Result<StiffnessModel> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::Invalid(format!(
            "stiffness fit needs at least {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let (c, r2) = polynomial_fit(samples, 2)?;
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.0), hi.max(s.0))
    });
    let model = StiffnessModel {
        c1: c[2],
        c2: c[1],
        c3: c[0],
        fit_r2: r2,
        sample_count: samples.len(),
        lambda_min: lo,
        lambda_max: hi,
    };
    model.validate()?;
    Ok(model)
}

pub fn dynamic_stiffness(m: &StiffnessModel, lambda: f64) -> f64 {
    m.dynamic_stiffness(lambda)
}

pub fn indentation_for_force(m: &StiffnessModel, force: f64) -> Result<f64> {
    m.indentation_for_force(force)
}

/// Indentation of every frame relative to the first frame in contact.
///
/// `λ` is the displacement of the probe origin projected on the beam axis of
/// the contact frame. Frames before contact get `None`.
pub fn indentations_from_poses(frames: &[Frame], contact_threshold: f64) -> Result<Vec<Option<f64>>> {
    let contact = frames
        .iter()
        .position(|f| f.force > contact_threshold)
        .ok_or_else(|| Error::Invalid("probe never reaches contact".into()))?;
    let p0 = frames[contact].pose.translation;
    let axis = frames[contact].pose.beam_axis();
    Ok(frames
        .iter()
        .enumerate()
        .map(|(i, f)| (i >= contact).then(|| (f.pose.translation - p0).dot(&axis)))
        .collect())
}

/// `(λ, F)` samples of the in-contact part of a palpation.
pub fn palpation_samples(frames: &[Frame]) -> Result<Vec<(f64, f64)>> {
    let lambdas = indentations_from_poses(frames, CONTACT_THRESHOLD)?;
    Ok(frames
        .iter()
        .zip(lambdas)
        .filter_map(|(f, l)| l.map(|l| (l, f.force)))
        .collect())
}

/// Mean and standard deviation of `k_d` (N/mm) over the given indentations.
pub fn stiffness_stats(m: &StiffnessModel, lambdas: &[f64]) -> (f64, f64) {
    let kd: Vec<f64> = lambdas.iter().map(|&l| m.dynamic_stiffness(l)).collect();
    mean_sd(&kd)
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(law: ForceLaw, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let l = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                (l, law.force(l))
            })
            .collect()
    }

    #[test]
    fn exact_quadratic_recovered() {
        let law = ForceLaw::new(0.05, 3.0, 0.1);
        let m = fit_stiffness(&samples(law, 0.0, 10.0, 20)).unwrap();
        assert!((m.c1 - 0.05).abs() < 1e-6);
        assert!((m.c2 - 3.0).abs() < 1e-6);
        assert!((m.c3 - 0.1).abs() < 1e-6);
        assert!(m.fit_r2 > 1.0 - 1e-12);
        assert_eq!(m.sample_count, 20);
    }

    #[test]
    fn degenerate_and_short_inputs() {
        let flat: Vec<_> = (0..12).map(|i| (2.0, i as f64)).collect();
        assert!(matches!(fit_stiffness(&flat), Err(Error::Numerical(_))));
        let short = samples(ForceLaw::new(0.0, 1.0, 0.0), 0.0, 1.0, 5);
        assert!(matches!(fit_stiffness(&short), Err(Error::Invalid(_))));
    }

    #[test]
    fn rejects_softening_fit() {
        // Force peaks inside the range: k_d < 0 at the top end.
        let law = ForceLaw::new(-0.5, 3.0, 0.0);
        let err = fit_stiffness(&samples(law, 0.0, 5.0, 15)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn dynamic_stiffness_examples() {
        let lin = StiffnessModel::from_law(ForceLaw::new(0.0, 3.2, 0.0), 10.0);
        for l in [0.0, 1.5, 9.0] {
            assert_eq!(dynamic_stiffness(&lin, l), 3.2);
        }
        let q = StiffnessModel::from_law(ForceLaw::new(0.05, 3.0, 0.0), 10.0);
        assert!((dynamic_stiffness(&q, 10.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn inversion_examples() {
        let lin = StiffnessModel::from_law(ForceLaw::new(0.0, 2.0, 0.0), 10.0);
        assert_eq!(indentation_for_force(&lin, 6.0).unwrap(), 3.0);
        let q = StiffnessModel::from_law(ForceLaw::new(0.05, 3.0, 0.4), 10.0);
        assert_eq!(indentation_for_force(&q, 0.4).unwrap(), 0.0);
        assert!(matches!(indentation_for_force(&q, 0.39), Err(Error::Domain(_))));
    }

    #[test]
    fn stiffness_at_force_is_derivative_at_root() {
        let law = ForceLaw::new(0.07, 0.5, 0.5);
        for f in [0.5, 3.0, 16.0] {
            let l = law.indentation_for_force(f).unwrap();
            let k = law.stiffness_at_force(f).unwrap();
            assert!((k - law.dynamic_stiffness(l)).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_fit_matches_power_basis_oracle() {
        // F = 1 + 2λ - 0.1λ² + 0.01λ³ sampled far from the origin.
        let s: Vec<_> = (0..30)
            .map(|i| {
                let l = 20.0 + i as f64 * 0.5;
                (l, 1.0 + 2.0 * l - 0.1 * l * l + 0.01 * l.powi(3))
            })
            .collect();
        let (c, r2) = polynomial_fit(&s, 3).unwrap();
        let expect = [1.0, 2.0, -0.1, 0.01];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{c:?}");
        }
        assert!(r2 > 1.0 - 1e-12);
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip_force_lambda_force(c1 in 0.0f64..0.2, c2 in 0.1f64..5.0, c3 in 0.0f64..1.0, l in 0.0f64..15.0) {
            let law = ForceLaw::new(c1, c2, c3);
            let f = law.force(l);
            let back = law.indentation_for_force(f).unwrap();
            prop_assert!((back - l).abs() <= 1e-9 * (1.0 + l));
            prop_assert!((law.force(back) - f).abs() <= 1e-9 * (1.0 + f));
        }

        #[test]
        fn fitted_force_is_monotone(c1 in 0.0f64..0.2, c2 in 0.5f64..5.0, c3 in 0.0f64..1.0) {
            let law = ForceLaw::new(c1, c2, c3);
            let m = fit_stiffness(&samples(law, 0.0, 10.0, 15)).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=100 {
                let l = m.lambda_min + (m.lambda_max - m.lambda_min) * i as f64 / 100.0;
                let f = m.force(l);
                prop_assert!(f > prev);
                prev = f;
            }
        }
    }
}
