//! Stiffness atlas along the sweep trajectory and model rebinding.
//!
//! Palpations at a few arc-length positions give one [`StiffnessModel`] each.
//! At an arbitrary position the models are blended with inverse-distance
//! weights; because `k_d` is linear in the coefficients, blending `k_d(λ)`
//! pointwise is the same as blending `(c1, c2, c3)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{cumulative_load, DisplacementRegression};
use crate::stiffness::StiffnessModel;

/// Distance below which a position coincides with a sample, mm.
pub const COINCIDENCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessAtlas {
    /// Arc-length sample positions, mm, strictly increasing.
    pub positions: Vec<f64>,
    pub models: Vec<StiffnessModel>,
    pub length_mm: f64,
}

impl StiffnessAtlas {
    pub fn new(positions: Vec<f64>, models: Vec<StiffnessModel>, length_mm: f64) -> Result<Self> {
        let atlas = Self { positions, models, length_mm };
        atlas.validate()?;
        Ok(atlas)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.models.len() {
            return Err(Error::Invalid("atlas positions and models differ in length".into()));
        }
        if self.positions.len() < 2 {
            return Err(Error::Invalid(format!(
                "atlas needs palpations at >= 2 positions, got {}",
                self.positions.len()
            )));
        }
        if !(self.length_mm.is_finite() && self.length_mm >= 0.0) {
            return Err(Error::Invalid("trajectory length must be >= 0".into()));
        }
        if self.positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("atlas positions must be strictly increasing".into()));
        }
        if self.positions.iter().any(|&s| !(s >= 0.0 && s <= self.length_mm)) {
            return Err(Error::Invalid("atlas positions must lie on the trajectory".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        Ok(())
    }

    pub fn interpolation_weights(&self, s: f64) -> Result<Vec<f64>> {
        if self.positions.is_empty() {
            return Err(Error::Invalid("empty stiffness atlas".into()));
        }
        if !(s >= 0.0 && s <= self.length_mm) {
            return Err(Error::Domain(format!(
                "position {s} mm outside trajectory [0, {}]",
                self.length_mm
            )));
        }
        let dist: Vec<f64> = self.positions.iter().map(|p| (p - s).abs()).collect();
        if let Some(j) = dist.iter().position(|&d| d < COINCIDENCE) {
            let mut w = vec![0.0; dist.len()];
            w[j] = 1.0;
            return Ok(w);
        }
        let total: f64 = dist.iter().sum();
        let raw: Vec<f64> = dist.iter().map(|d| total / d).collect();
        let norm: f64 = raw.iter().sum();
        Ok(raw.iter().map(|r| r / norm).collect())
    }

    /// Blended force law at `s`.
    pub fn local_model(&self, s: f64) -> Result<StiffnessModel> {
        let w = self.interpolation_weights(s)?;
        let mut out = StiffnessModel {
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            fit_r2: 0.0,
            sample_count: 0,
            lambda_min: f64::INFINITY,
            lambda_max: f64::NEG_INFINITY,
        };
        for (wi, m) in w.iter().zip(&self.models) {
            out.c1 += wi * m.c1;
            out.c2 += wi * m.c2;
            out.c3 += wi * m.c3;
            out.fit_r2 += wi * m.fit_r2;
            out.sample_count += m.sample_count;
            out.lambda_min = out.lambda_min.min(m.lambda_min);
            out.lambda_max = out.lambda_max.max(m.lambda_max);
        }
        out.fit_r2 = out.fit_r2.clamp(0.0, 1.0);
        Ok(out)
    }

    /// `Σ ω_i · k_d^i(λ)` at position `s`.
    pub fn local_stiffness(&self, s: f64, lambda: f64) -> Result<f64> {
        let w = self.interpolation_weights(s)?;
        Ok(w.iter().zip(&self.models).map(|(wi, m)| wi * m.dynamic_stiffness(lambda)).sum())
    }
}

pub fn interpolation_weights(atlas: &StiffnessAtlas, s: f64) -> Result<Vec<f64>> {
    atlas.interpolation_weights(s)
}

pub fn local_stiffness(atlas: &StiffnessAtlas, s: f64, lambda: f64) -> Result<f64> {
    atlas.local_stiffness(s, lambda)
}

/// A regression bound to a stiffness trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundEvaluator {
    pub regression: DisplacementRegression,
    pub stiffness: StiffnessModel,
}

impl BoundEvaluator {
    /// Cumulative displacement at `(x, y)` under contact force `force`, pixels.
    pub fn eval(&self, x: f64, y: f64, force: f64) -> Result<(f64, f64)> {
        self.regression.eval_cumulative(x, y, force, &self.stiffness)
    }

    /// Integrated load for `force`, mm.
    pub fn load(&self, force: f64) -> Result<f64> {
        cumulative_load(&self.stiffness, force, self.regression.n_force_intervals)
    }
}

/// Binds `reg` to a local stiffness model; no re-optimisation.
pub fn rebind(reg: &DisplacementRegression, stiffness: &StiffnessModel) -> Result<BoundEvaluator> {
    if !(stiffness.dynamic_stiffness(0.0) > 0.0) || !(stiffness.dynamic_stiffness(stiffness.lambda_max.max(0.0)) > 0.0) {
        return Err(Error::Domain("bound stiffness must be positive".into()));
    }
    Ok(BoundEvaluator {
        regression: reg.clone(),
        stiffness: *stiffness,
    })
}

/// Where the indentation of a sweep frame comes from when restoring its pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSource {
    /// Probe displacement along the beam relative to the trajectory.
    #[default]
    Pose,
    /// Inversion of the blended force law at the measured force.
    Force,
}

/// How a sweep frame's evaluator is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// Local stiffness from the atlas (stiffness-based correction).
    #[default]
    LocalStiffness,
    /// Training stiffness everywhere (force-based baseline).
    TrainingStiffness,
}

/// Everything needed to correct a sweep; serialised as the model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionModel {
    pub phantom_id: String,
    pub training_position_mm: f64,
    pub layer_thickness_mm: f64,
    #[serde(default)]
    pub lambda_source: LambdaSource,
    pub regression: DisplacementRegression,
    pub training_stiffness: StiffnessModel,
    pub atlas: StiffnessAtlas,
}

impl CorrectionModel {
    pub fn validate(&self) -> Result<()> {
        self.regression.validate()?;
        self.training_stiffness.validate()?;
        self.atlas.validate()
    }

    pub fn evaluator_at(&self, s: f64, binding: Binding) -> Result<BoundEvaluator> {
        let s = s.clamp(0.0, self.atlas.length_mm);
        let stiffness = match binding {
            Binding::LocalStiffness => self.atlas.local_model(s)?,
            Binding::TrainingStiffness => self.training_stiffness,
        };
        rebind(&self.regression, &stiffness)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("model serialisation: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("model file: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
