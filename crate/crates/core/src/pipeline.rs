//! End-to-end experiment: palpate, fit, correct sweeps, compound, score.

use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::compounding::{compound_with_grid, extent_of, VolumeGrid, DEFAULT_SPACING_MM};
use crate::correction::{correct_frame, correct_sweep};
use crate::error::{Error, Result, StageExt};
use crate::exec::Exec;
use crate::io::{write_sweep, Frame, SweepRecording};
use crate::metrics::{
    dice, evaluate_sweeps, evaluate_volumes, sample_frames, segment_vessel, summary_table, LevelSummary, MetricsReport,
    SegmentParams, VesselMask, DEFAULT_SAMPLED_FRAMES,
};
use crate::optical_flow::{select_features, track_sequence, tracks_to_csv, FeatureParams, LkParams, TrackedPoint};
use crate::propagation::{Binding, CorrectionModel, LambdaSource, StiffnessAtlas};
use crate::regression::{
    build_training_set, fit_regression, DisplacementRegression, FitOptions, DEFAULT_BOUNDARY_SAMPLES,
    DEFAULT_FORCE_INTERVALS,
};
use crate::simulator::{Phantom, PhantomSpec};
use crate::stiffness::{
    fit_stiffness, indentations_from_poses, palpation_samples, stiffness_stats, StiffnessModel, CONTACT_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PalpationConfig {
    /// Number of palpation sites `N_k`, spread evenly over the path.
    pub positions: usize,
    pub max_force_n: f64,
    pub steps: usize,
    /// Site whose palpation trains the regression.
    pub training_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingConfig {
    pub features: FeatureParams,
    pub lk: LkParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub force_intervals: usize,
    pub boundary_samples: usize,
    pub lambda_source: LambdaSource,
    pub fit: FitOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Contact force ladder, N.
    pub forces_n: Vec<f64>,
    pub frames: usize,
    pub binding: Binding,
    /// Write every simulated and corrected sweep to disk.
    pub write_recordings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompoundingConfig {
    pub spacing_mm: f64,
    /// Force levels whose deformed and corrected volumes are written.
    pub write_forces_n: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub frames_per_sweep: usize,
    pub seed: u64,
    pub segment: SegmentParams,
    pub segment_volume: SegmentParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub palpation: PalpationConfig,
    pub tracking: TrackingConfig,
    pub regression: RegressionConfig,
    pub sweep: SweepConfig,
    pub compounding: CompoundingConfig,
    pub metrics: MetricsConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // A different tagged variant replaces the table wholesale.
                if b.contains_key("profile") && o.get("profile").is_some_and(|p| Some(p) != b.get("profile")) {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let phantom = PhantomSpec::preset(name)?;
        let soft = name == "soft";
        let (max_force_n, forces_n, write) = if soft {
            (10.0, vec![2.0, 4.0, 6.0, 8.0], vec![4.0])
        } else {
            (25.0, vec![5.0, 10.0, 15.0, 20.0, 25.0], vec![15.0])
        };
        Ok(Self {
            seed: 7,
            phantom,
            palpation: PalpationConfig { positions: if soft { 3 } else { 4 }, max_force_n, steps: 20, training_index: 0 },
            tracking: TrackingConfig { features: FeatureParams::default(), lk: LkParams::default() },
            regression: RegressionConfig {
                force_intervals: DEFAULT_FORCE_INTERVALS,
                boundary_samples: DEFAULT_BOUNDARY_SAMPLES,
                lambda_source: LambdaSource::Pose,
                fit: FitOptions::default(),
            },
            sweep: SweepConfig { forces_n, frames: 100, binding: Binding::LocalStiffness, write_recordings: true },
            compounding: CompoundingConfig { spacing_mm: DEFAULT_SPACING_MM, write_forces_n: write },
            metrics: MetricsConfig {
                frames_per_sweep: DEFAULT_SAMPLED_FRAMES,
                seed: 10,
                segment: SegmentParams::default(),
                segment_volume: SegmentParams::for_volume(),
            },
        })
    }

    /// Parses a config file: an optional `preset` key selects the defaults
    /// (`stiff` when absent) and every other key overrides them.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e| Error::Invalid(format!("config: {e}")))?;
        let preset = match user.remove("preset") {
            None => "stiff".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(Error::Invalid(format!("config: preset must be a string, got {v}"))),
        };
        let mut base = toml::Table::try_from(Self::preset(&preset)?).map_err(|e| Error::Invalid(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.tracking.lk.validate()?;
        let p = &self.palpation;
        if p.positions < 2 {
            return Err(Error::Invalid("palpation.positions must be >= 2".into()));
        }
        if p.training_index >= p.positions {
            return Err(Error::Invalid("palpation.training_index out of range".into()));
        }
        if self.sweep.frames < 2 {
            return Err(Error::Invalid("sweep.frames must be >= 2".into()));
        }
        if let Some(f) = self.sweep.forces_n.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
            return Err(Error::Invalid(format!("sweep force {f} N must be >= 0")));
        }
        if !(self.compounding.spacing_mm.is_finite() && self.compounding.spacing_mm > 0.0) {
            return Err(Error::Invalid("compounding.spacing_mm must be > 0".into()));
        }
        if self.sweep.forces_n.iter().any(|&f| f > p.max_force_n) {
            log::warn!("sweep forces exceed the palpation range; the regression will extrapolate");
        }
        Ok(())
    }

    /// Palpation site `k`, mm along the path.
    pub fn palpation_position(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.phantom.path_length_mm / self.palpation.positions as f64
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStiffness {
    pub position_mm: f64,
    pub model: StiffnessModel,
    /// Mean and SD of `k_d` over the palpation, N/mm.
    pub kd_mean: f64,
    pub kd_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PalpationDice {
    pub position_mm: f64,
    pub force_n: f64,
    pub dice_deformed: f64,
    pub dice_corrected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub phantom_id: String,
    pub seed: u64,
    pub sites: Vec<SiteStiffness>,
    pub tracked_points: usize,
    pub regression: DisplacementRegression,
    pub palpation_dice: Vec<PalpationDice>,
    pub sweep_2d: Vec<LevelSummary>,
    pub volume_3d: Vec<LevelSummary>,
}

impl PipelineReport {
    /// Human-readable tables.
    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "phantom {}  seed {}\n", self.phantom_id, self.seed);
        let _ = writeln!(s, "stiffness per site");
        for st in &self.sites {
            let _ = writeln!(
                s,
                "  s={:>6.2} mm  c1={:.5} c2={:.5} c3={:.4}  R2={:.5}  k_d={:.1}±{:.1} N/m",
                st.position_mm,
                st.model.c1,
                st.model.c2,
                st.model.c3,
                st.model.fit_r2,
                st.kd_mean * 1e3,
                st.kd_sd * 1e3
            );
        }
        let _ = writeln!(
            s,
            "\nregression: {} tracked points, final loss {:.3e}",
            self.tracked_points, self.regression.final_loss
        );
        let _ = write!(s, "\npalpation dice per site, deformed -> corrected");
        let mut last = f64::NAN;
        for d in &self.palpation_dice {
            if d.position_mm != last {
                let _ = write!(s, "\n  s={:>6.2} mm:", d.position_mm);
                last = d.position_mm;
            }
            let _ = write!(s, "  {}N {:.2}->{:.2}", d.force_n, d.dice_deformed, d.dice_corrected);
        }
        let _ = writeln!(s, "\n\nsweep frames (2D)\n{}", summary_table(&self.sweep_2d));
        let _ = writeln!(s, "volume axial slices (3D)\n{}", summary_table(&self.volume_3d));
        s
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn force_tag(f: f64) -> String {
    format!("f{f:05.1}")
}

/// Everything learned from the palpations.
pub struct Training {
    pub sites: Vec<SiteStiffness>,
    pub palpations: Vec<SweepRecording>,
    pub model: CorrectionModel,
    pub tracks: Vec<Vec<TrackedPoint>>,
}

/// Palpation at every site followed by [`fit_model`]. Writes recordings,
/// tracks and the model under `out`.
pub fn train(cfg: &PipelineConfig, phantom: &Phantom, out: Option<&Path>, exec: Exec) -> Result<Training> {
    let p = &cfg.palpation;
    let mut palpations = Vec::new();
    for k in 0..p.positions {
        let s = cfg.palpation_position(k);
        let rec = phantom
            .palpation(s, p.max_force_n, p.steps, derive_seed(cfg.seed, 100 + k as u64), exec)
            .stage("palpation")?;
        if let Some(out) = out {
            write_sweep(&rec, out.join("palpation").join(format!("site{k}"))).stage("palpation")?;
        }
        palpations.push(rec);
    }
    let training = fit_model(
        palpations,
        p.training_index,
        cfg.phantom.layer_thickness_mm,
        cfg.phantom.path_length_mm,
        &cfg.tracking,
        &cfg.regression,
        exec,
    )?;
    if let Some(out) = out {
        write_text(&out.join("tracks.csv"), &tracks_to_csv(&training.tracks))?;
        training.model.save(&out.join("model.toml"))?;
    }
    Ok(training)
}

/// Stiffness fit of one palpation.
pub fn site_stiffness(rec: &SweepRecording) -> Result<SiteStiffness> {
    let position_mm = rec.manifest.acquisition.position_mm.ok_or_else(|| {
        Error::Invalid("palpation manifest has no acquisition.position_mm".into())
    })?;
    let samples = palpation_samples(&rec.frames).stage("fit-stiffness")?;
    let model = fit_stiffness(&samples).stage("fit-stiffness")?;
    let lambdas: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (kd_mean, kd_sd) = stiffness_stats(&model, &lambdas);
    info!("site at {position_mm:.2} mm: k_d {:.1} ± {:.1} N/m", kd_mean * 1e3, kd_sd * 1e3);
    Ok(SiteStiffness { position_mm, model, kd_mean, kd_sd })
}

/// Stiffness fits at every site, then tracking and regression on the
/// palpation at `training_index`.
pub fn fit_model(
    palpations: Vec<SweepRecording>,
    training_index: usize,
    layer_thickness_mm: f64,
    path_length_mm: f64,
    tracking: &TrackingConfig,
    regression: &RegressionConfig,
    exec: Exec,
) -> Result<Training> {
    if training_index >= palpations.len() {
        return Err(Error::Invalid(format!(
            "training index {training_index} with {} palpations",
            palpations.len()
        )));
    }
    let sites = palpations.iter().map(site_stiffness).collect::<Result<Vec<_>>>()?;
    let train_rec = &palpations[training_index];
    let frames: Vec<_> = train_rec.frames.iter().map(|f| f.float_image()).collect();
    let points = select_features(&frames[0], &tracking.features).stage("track")?;
    let tracks = track_sequence(&frames, &points, &tracking.lk, exec).stage("track")?;
    let ts = build_training_set(
        train_rec,
        &tracks,
        &sites[training_index].model,
        layer_thickness_mm,
        regression.boundary_samples,
        regression.force_intervals,
    )
    .stage("fit")?;
    let fitted = fit_regression(&ts, &regression.fit).stage("fit")?;
    info!("regression fitted: loss {:.3e} after {} iterations", fitted.final_loss, fitted.iterations);

    let atlas = StiffnessAtlas::new(
        sites.iter().map(|s| s.position_mm).collect(),
        sites.iter().map(|s| s.model).collect(),
        path_length_mm,
    )
    .stage("propagation")?;
    let model = CorrectionModel {
        phantom_id: train_rec.manifest.phantom_id.clone(),
        training_position_mm: sites[training_index].position_mm,
        layer_thickness_mm,
        lambda_source: regression.lambda_source,
        regression: fitted,
        training_stiffness: sites[training_index].model,
        atlas,
    };
    Ok(Training { sites, palpations, model, tracks })
}

fn dice_or_empty(frame: &Frame, truth: &VesselMask, seg: &SegmentParams) -> Result<f64> {
    let m = match segment_vessel(&frame.float_image(), frame.valid_mask().as_deref(), seg) {
        Ok(m) => m,
        Err(Error::NoVessel(_)) => VesselMask::empty(truth.width, truth.height),
        Err(e) => return Err(e),
    };
    dice(&m, truth)
}

/// Dice at each site for the palpation frame nearest every ladder force,
/// before and after correction, against that site's zero-force frame.
pub fn palpation_dice(cfg: &PipelineConfig, training: &Training, exec: Exec) -> Result<Vec<PalpationDice>> {
    let seg = &cfg.metrics.segment;
    let mut out = Vec::new();
    for (site, rec) in training.sites.iter().zip(&training.palpations) {
        let truth = segment_vessel(&rec.frames[0].float_image(), None, seg)?;
        let ev = training.model.evaluator_at(site.position_mm, cfg.sweep.binding)?;
        let lambdas = indentations_from_poses(&rec.frames, CONTACT_THRESHOLD)?;
        for &f in &cfg.sweep.forces_n {
            let (i, frame) = rec
                .frames
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1.force - f).abs().total_cmp(&(b.1.force - f).abs()))
                .expect("palpation has frames");
            let corrected = correct_frame(frame, &ev, lambdas[i].unwrap_or(0.0), exec)?;
            out.push(PalpationDice {
                position_mm: site.position_mm,
                force_n: f,
                dice_deformed: dice_or_empty(frame, &truth, seg)?,
                dice_corrected: dice_or_empty(&corrected, &truth, seg)?,
            });
        }
    }
    Ok(out)
}

/// Runs the whole experiment, writing artifacts and the report under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, exec: Exec) -> Result<PipelineReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = cfg.to_toml()?;
    info!("resolved config:\n{resolved}");
    write_text(&out.join("config.toml"), &resolved)?;

    let phantom = Phantom::new(cfg.phantom.clone()).stage("simulate")?;
    let training = train(cfg, &phantom, Some(out), exec)?;
    let palp = palpation_dice(cfg, &training, exec).stage("metrics")?;

    // Every sweep shares one noise seed so a zero-force sweep equals the truth.
    let sweep_seed = derive_seed(cfg.seed, 200);
    let path = cfg.phantom.path_length_mm;
    let n = cfg.sweep.frames;
    let sweeps_dir = out.join("sweeps");
    let truth = phantom.sweep(0.0, path, n, sweep_seed, exec).stage("simulate")?;
    if cfg.sweep.write_recordings {
        write_sweep(&truth, sweeps_dir.join("truth")).stage("simulate")?;
    }

    // One grid for every volume so slices compare voxel for voxel.
    let spacing = cfg.compounding.spacing_mm;
    let max_force = cfg.sweep.forces_n.iter().copied().fold(0.0, f64::max);
    let max_lambda = (0..=20)
        .map(|i| cfg.phantom.law_at(path * i as f64 / 20.0).indentation_or_zero(max_force))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let (lo, mut hi) = extent_of(&[&truth]).stage("compound")?;
    hi.z += max_lambda;
    let grid = VolumeGrid::covering(lo, hi, spacing, 2).stage("compound")?;
    let truth_vol = compound_with_grid(&truth, &grid, exec).stage("compound")?;
    truth_vol.write(&out.join("volumes").join("truth")).stage("compound")?;

    // Axial slices within the swept range.
    let y_lo = ((0.0 - grid.origin[1]) / spacing).ceil().max(0.0) as usize;
    let y_hi = (((path - grid.origin[1]) / spacing).floor() as usize).min(grid.dims[1] - 1);
    // Sparse sweeps leave empty planes between frames; only sample covered ones.
    let slab = grid.dims[0] * grid.dims[2];
    let slice_pool: Vec<usize> =
        (y_lo..=y_hi).filter(|&j| truth_vol.weight[j * slab..(j + 1) * slab].iter().any(|&w| w > 0.0)).collect();
    if slice_pool.is_empty() {
        return Err(Error::Invalid("no compounded axial slice inside the swept range".into())).stage("metrics");
    }
    let frame_idx = sample_frames(n, cfg.metrics.frames_per_sweep, cfg.metrics.seed);
    let slice_idx: Vec<usize> =
        sample_frames(slice_pool.len(), cfg.metrics.frames_per_sweep, cfg.metrics.seed.wrapping_add(1))
            .into_iter()
            .map(|i| slice_pool[i])
            .collect();

    let mut report_2d = MetricsReport::default();
    let mut report_3d = MetricsReport::default();
    for &f in &cfg.sweep.forces_n {
        let tag = force_tag(f);
        let deformed = phantom.sweep(f, path, n, sweep_seed, exec).stage("simulate")?;
        let corrected = correct_sweep(&deformed, &training.model, cfg.sweep.binding, exec).stage("sweep-correct")?;
        if cfg.sweep.write_recordings {
            write_sweep(&deformed, sweeps_dir.join(&tag).join("deformed")).stage("simulate")?;
            write_sweep(&corrected, sweeps_dir.join(&tag).join("corrected")).stage("sweep-correct")?;
        }
        let mut rows =
            evaluate_sweeps(&truth, &deformed, &corrected, &frame_idx, &cfg.metrics.segment, exec).stage("metrics")?;
        for r in &mut rows {
            r.force = f;
        }
        report_2d.rows.extend(rows);

        let dvol = compound_with_grid(&deformed, &grid, exec).stage("compound")?;
        let cvol = compound_with_grid(&corrected, &grid, exec).stage("compound")?;
        if cfg.compounding.write_forces_n.contains(&f) {
            dvol.write(&out.join("volumes").join(&tag).join("deformed")).stage("compound")?;
            cvol.write(&out.join("volumes").join(&tag).join("corrected")).stage("compound")?;
        }
        let rows = evaluate_volumes(&truth_vol, &dvol, &cvol, &slice_idx, f, &cfg.metrics.segment_volume, exec)
            .stage("metrics")?;
        report_3d.rows.extend(rows);
        info!("force {f} N done");
    }

    let report_dir = out.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    write_text(&report_dir.join("frames_2d.csv"), &report_2d.to_csv())?;
    write_text(&report_dir.join("slices_3d.csv"), &report_3d.to_csv())?;
    let report = PipelineReport {
        phantom_id: cfg.phantom.id.clone(),
        seed: cfg.seed,
        tracked_points: training.tracks.last().map_or(0, |t| t.iter().filter(|p| p.is_tracked()).count()),
        regression: training.model.regression.clone(),
        sites: training.sites,
        palpation_dice: palp,
        sweep_2d: report_2d.summarize_by(|r| r.force),
        volume_3d: report_3d.summarize_by(|r| r.force),
    };
    let text = toml::to_string(&report).map_err(|e| Error::Invalid(e.to_string()))?;
    write_text(&report_dir.join("report.toml"), &text)?;
    write_text(&report_dir.join("summary.txt"), &report.render())?;
    Ok(report)
}
