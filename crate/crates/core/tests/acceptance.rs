//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Runs as a plain binary (`harness = false`) so the lines always print.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uscomp_core::correction::correct_frame;
use uscomp_core::imaging::FloatImage;
use uscomp_core::io::Frame;
use uscomp_core::metrics::{dice, segment_vessel, SegmentParams, VesselMask};
use uscomp_core::optical_flow::{select_features, track, FeatureParams, LkParams};
use uscomp_core::pipeline::{run_pipeline, train, PipelineConfig, Training};
use uscomp_core::propagation::{Binding, BoundEvaluator, CorrectionModel, StiffnessAtlas};
use uscomp_core::regression::{build_training_set, cumulative_load, QuadraticLoss};
use uscomp_core::simulator::{Phantom, PhantomSpec, StiffnessProfile};
use uscomp_core::stiffness::{fit_stiffness, palpation_samples, polynomial_fit, ForceLaw, StiffnessModel};
use uscomp_core::{Exec, Pose, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

const EXEC: Exec = Exec::Parallel;

// 1. Stiffness fit fidelity.
fn stiffness_fit() -> Result<Outcome> {
    let mut spec = PhantomSpec::stiff();
    spec.force_noise = 0.0;
    let s = 12.0;
    let truth = spec.law_at(s);
    let ph = Phantom::new(spec)?;
    let rec = ph.palpation(s, 25.0, 20, 1, EXEC)?;
    let t0 = Instant::now();
    let fit = fit_stiffness(&palpation_samples(&rec.frames)?)?;
    let dt = t0.elapsed().as_secs_f64();
    let errs = [rel(fit.c1, truth.c1), rel(fit.c2, truth.c2), rel(fit.c3, truth.c3)];
    let worst = errs.iter().copied().fold(0.0, f64::max);

    let soft = Phantom::new(PhantomSpec::soft())?;
    let rec = soft.palpation(30.0, 10.0, 20, 2, EXEC)?;
    let t1 = Instant::now();
    let samples = palpation_samples(&rec.frames)?;
    let quad = fit_stiffness(&samples)?;
    let (_, r2_cubic) = polynomial_fit(&samples, 3)?;
    let dt = dt + t1.elapsed().as_secs_f64();
    let gain = r2_cubic - quad.fit_r2;
    Ok(outcome(
        worst <= 0.02 && quad.fit_r2 >= 0.99 && gain <= 0.01 && dt < 1.0,
        format!(
            "noise-free max coeff err {:.2e} (<=2%); soft sigma=0.1N R2 {:.5} (>=0.99), cubic gain {:.2e} (<=0.01); fit time {:.3}s (<1s)",
            worst, quad.fit_r2, gain, dt
        ),
    ))
}

fn shift_int(img: &FloatImage, sx: isize, sy: isize) -> FloatImage {
    FloatImage::from_fn(img.width, img.height, |x, y| {
        let xs = (x as isize - sx).clamp(0, img.width as isize - 1) as usize;
        let ys = (y as isize - sy).clamp(0, img.height as isize - 1) as usize;
        img.get(xs, ys)
    })
}

// 2. Optical-flow oracle.
fn optical_flow() -> Result<Outcome> {
    let ph = Phantom::new(PhantomSpec::stiff())?;
    let reference = FloatImage::from_gray(&ph.render(10.0, 0.0, 5, EXEC)?);
    let lk = LkParams::default();
    let fp = FeatureParams::default();

    let t0 = Instant::now();
    let pts = select_features(&reference, &fp)?;
    let moved = shift_int(&reference, 2, 0);
    let res = track(&reference, &moved, &pts, &lk, EXEC)?;
    let dt_shift = t0.elapsed().as_secs_f64();
    let good = res
        .iter()
        .filter(|t| t.displacement.is_some_and(|d| (d[0] - 2.0).abs() <= 0.25 && d[1].abs() <= 0.25))
        .count();
    let frac = good as f64 / res.len() as f64;

    let mut worst_rms: f64 = 0.0;
    let mut worst_dt: f64 = dt_shift;
    for lambda in [1.0, 2.0, 3.0] {
        let deformed = FloatImage::from_gray(&ph.render(10.0, lambda, 6, EXEC)?);
        let t = Instant::now();
        let res = track(&reference, &deformed, &pts, &lk, EXEC)?;
        worst_dt = worst_dt.max(t.elapsed().as_secs_f64());
        let fwd = ph.spec.forward(lambda);
        let (mut acc, mut n) = (0.0, 0usize);
        for tp in &res {
            if let Some(d) = tp.displacement {
                let (ux, uy) = fwd.displacement(tp.ref_pixel.x, tp.ref_pixel.y);
                acc += (d[0] - ux).powi(2) + (d[1] - uy).powi(2);
                n += 1;
            }
        }
        worst_rms = worst_rms.max((acc / n.max(1) as f64).sqrt());
    }
    Ok(outcome(
        frac >= 0.95 && worst_rms <= 0.5 && worst_dt < 2.0,
        format!(
            "2px shift: {:.1}% within 0.25px (>=95%); forward-field RMS {:.3}px at lambda<=3mm (<=0.5); slowest pair {:.3}s (<2s)",
            100.0 * frac,
            worst_rms,
            worst_dt
        ),
    ))
}

fn stiff_training() -> Result<(PipelineConfig, Phantom, Training)> {
    let cfg = PipelineConfig::preset("stiff")?;
    let ph = Phantom::new(cfg.phantom.clone())?;
    let tr = train(&cfg, &ph, None, EXEC)?;
    Ok((cfg, ph, tr))
}

// 3. Regression invariants.
fn regression_invariants(cfg: &PipelineConfig, tr: &Training) -> Result<Outcome> {
    let reg = &tr.model.regression;
    let stiff = &tr.model.training_stiffness;
    let (w, h) = (400.0, 300.0);
    let zero = [(0.0, 0.0), (200.0, 150.0), (400.0, 300.0), (37.0, 251.0)]
        .iter()
        .map(|&(x, y)| reg.eval_cumulative(x, y, 0.0, stiff))
        .collect::<Result<Vec<_>>>()?;
    let exact_zero = zero.iter().all(|&(a, b)| a == 0.0 && b == 0.0);

    let lt = cfg.phantom.layer_thickness_mm;
    let ts = build_training_set(
        &tr.palpations[cfg.palpation.training_index],
        &tr.tracks,
        stiff,
        lt,
        cfg.regression.boundary_samples,
        cfg.regression.force_intervals,
    )?;
    let (mut top_acc, mut top_n) = (0.0, 0usize);
    let mut bottom_worst: f64 = 0.0;
    for lvl in ts.levels.iter().filter(|l| l.lambda > 0.0) {
        for i in 0..=40 {
            let x = w * i as f64 / 40.0;
            let (a, b) = reg.eval_cumulative(x, 0.0, lvl.force, stiff)?;
            top_acc += a * a + b * b;
            top_n += 1;
        }
        let target = -(lvl.lambda / lt) * h;
        let mean_bottom = (0..=40)
            .map(|i| reg.eval_cumulative(w * i as f64 / 40.0, h, lvl.force, stiff).map(|d| d.1))
            .sum::<Result<f64>>()?
            / 41.0;
        bottom_worst = bottom_worst.max(rel(mean_bottom, target));
    }
    let top_rms = (top_acc / top_n as f64).sqrt();

    let loss = QuadraticLoss::new(&ts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grad_worst: f64 = 0.0;
    for _ in 0..20 {
        let kx = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let ky = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let (gx, gy) = loss.gradient(&kx, &ky);
        let step = 1e-6;
        for j in 0..4 {
            for (axis, g) in [(0, gx[j]), (1, gy[j])] {
                let mut a = (kx, ky);
                let mut b = (kx, ky);
                if axis == 0 {
                    a.0[j] += step;
                    b.0[j] -= step;
                } else {
                    a.1[j] += step;
                    b.1[j] -= step;
                }
                let fd = (loss.value(&a.0, &a.1) - loss.value(&b.0, &b.1)) / (2.0 * step);
                grad_worst = grad_worst.max((fd - g).abs() / g.abs().max(1e-3));
            }
        }
    }

    let linear = StiffnessModel::from_law(ForceLaw::new(0.0, stiff.c2, 0.0), stiff.lambda_max);
    let mut collapse_worst: f64 = 0.0;
    for &f in &[3.0, 11.0, 24.0] {
        for &(x, y) in &[(50.0, 40.0), (200.0, 150.0), (390.0, 290.0)] {
            let c = reg.eval_cumulative(x, y, f, &linear)?;
            let s = reg.eval_increment(x, y, f, linear.c2)?;
            collapse_worst = collapse_worst.max(rel(c.1, s.1)).max(if s.0 == 0.0 { 0.0 } else { rel(c.0, s.0) });
        }
    }

    // Convergence of the force integral on the nonlinear soft law.
    let soft_law = StiffnessModel::from_law(PhantomSpec::soft().law_at(30.0), 8.0);
    let mut fine = reg.clone();
    fine.n_force_intervals = 128;
    let mut conv_worst: f64 = 0.0;
    for &f in &[2.0, 5.0, 8.0] {
        for yi in 0..=6 {
            for xi in 0..=8 {
                let (x, y) = (w * xi as f64 / 8.0, h * yi as f64 / 6.0);
                let a = reg.eval_cumulative(x, y, f, &soft_law)?;
                let b = fine.eval_cumulative(x, y, f, &soft_law)?;
                conv_worst = conv_worst.max((a.0 - b.0).hypot(a.1 - b.1));
            }
        }
    }
    let h64 = cumulative_load(&soft_law, 8.0, 64)?;
    let h128 = cumulative_load(&soft_law, 8.0, 128)?;

    Ok(outcome(
        exact_zero && top_rms <= 0.5 && bottom_worst <= 0.05 && grad_worst <= 1e-4 && collapse_worst <= 1e-6 && conv_worst < 0.05,
        format!(
            "D(0)=0 exact: {exact_zero}; top RMS {top_rms:.3}px (<=0.5); bottom worst rel err {:.2}% (<=5%); gradient rel err {grad_worst:.1e} (<=1e-4); collapse rel err {collapse_worst:.1e} (<=1e-6); 64->128 intervals {conv_worst:.2e}px (<0.05, H {h64:.6}->{h128:.6}mm)",
            100.0 * bottom_worst
        ),
    ))
}

/// Deformed and corrected dice of one simulated frame at `(s, force)`.
fn frame_dice(ph: &Phantom, ev: &BoundEvaluator, s: f64, force: f64, seed: u64) -> Result<(f64, f64)> {
    let seg = SegmentParams::default();
    let lambda = ph.spec.law_at(s).indentation_or_zero(force)?;
    let truth = segment_vessel(&FloatImage::from_gray(&ph.render(s, 0.0, seed, EXEC)?), None, &seg)?;
    let frame = Frame {
        timestamp: 0.0,
        image: ph.render(s, lambda, seed, EXEC)?,
        force,
        pose: Pose::identity(),
        mask: None,
    };
    let corrected = correct_frame(&frame, ev, lambda, EXEC)?;
    let score = |f: &Frame| -> Result<f64> {
        let m = match segment_vessel(&f.float_image(), f.valid_mask().as_deref(), &seg) {
            Ok(m) => m,
            Err(uscomp_core::Error::NoVessel(_)) => VesselMask::empty(truth.width, truth.height),
            Err(e) => return Err(e),
        };
        dice(&m, &truth)
    };
    Ok((score(&frame)?, score(&corrected)?))
}

// 4. In-position 2D correction.
fn in_position(cfg: &PipelineConfig, ph: &Phantom, train_secs: f64, tr: &Training) -> Result<Outcome> {
    let s = tr.model.training_position_mm;
    let t0 = Instant::now();
    let ev = tr.model.evaluator_at(s, Binding::LocalStiffness)?;
    let (before, after) = frame_dice(ph, &ev, s, cfg.palpation.max_force_n, 99)?;
    let dt = train_secs + t0.elapsed().as_secs_f64();
    Ok(outcome(
        before <= 0.85 && after >= 0.92 && dt < 30.0,
        format!(
            "stiff at {s} mm, {} N: dice {before:.3} (<=0.85) -> {after:.3} (>=0.92, floor 0.90); fit+correct {dt:.1}s (<30s)",
            cfg.palpation.max_force_n
        ),
    ))
}

// 5. Propagation across positions.
fn propagation() -> Result<Outcome> {
    let mut cfg = PipelineConfig::preset("stiff")?;
    let base = PhantomSpec::stiff().law_at(0.0).scaled(1.0 / 0.95);
    cfg.phantom.stiffness = StiffnessProfile::linear_scaled(base, 0.8, 1.25);
    let ph = Phantom::new(cfg.phantom.clone())?;
    let tr = train(&cfg, &ph, None, EXEC)?;
    let (a, b) = (tr.model.training_position_mm, 30.0);
    let ka = ph.spec.law_at(a).dynamic_stiffness(0.0);
    let kb = ph.spec.law_at(b).dynamic_stiffness(0.0);
    let diff = rel(kb, ka);
    let ev = tr.model.evaluator_at(b, Binding::LocalStiffness)?;
    let mut worst: f64 = 1.0;
    let mut cells = Vec::new();
    for (i, &f) in cfg.sweep.forces_n.iter().enumerate() {
        let (before, after) = frame_dice(&ph, &ev, b, f, 300 + i as u64)?;
        worst = worst.min(after);
        cells.push(format!("{f}N {before:.2}->{after:.3}"));
    }
    Ok(outcome(
        diff >= 0.2 && worst >= 0.90,
        format!(
            "trained at {a} mm, tested at {b} mm, stiffness differs {:.0}% (>=20%); corrected dice min {worst:.3} (>=0.90): {}",
            100.0 * diff,
            cells.join(", ")
        ),
    ))
}

// 6. Cross-tissue extrapolation.
fn cross_tissue(tr_stiff: &Training) -> Result<Outcome> {
    let cfg = PipelineConfig::preset("soft")?;
    let ph = Phantom::new(cfg.phantom.clone())?;
    let soft_tr = train(&cfg, &ph, None, EXEC)?;
    let model = CorrectionModel {
        phantom_id: "soft".into(),
        training_position_mm: tr_stiff.model.training_position_mm,
        layer_thickness_mm: tr_stiff.model.layer_thickness_mm,
        lambda_source: tr_stiff.model.lambda_source,
        regression: tr_stiff.model.regression.clone(),
        training_stiffness: tr_stiff.model.training_stiffness,
        atlas: StiffnessAtlas::new(
            soft_tr.sites.iter().map(|s| s.position_mm).collect(),
            soft_tr.sites.iter().map(|s| s.model).collect(),
            cfg.phantom.path_length_mm,
        )?,
    };
    let s = 20.0;
    let local = model.evaluator_at(s, Binding::LocalStiffness)?;
    let baseline = model.evaluator_at(s, Binding::TrainingStiffness)?;
    let (mut sum_l, mut sum_b, mut min_l) = (0.0, 0.0, 1.0f64);
    let mut cells = Vec::new();
    for (i, &f) in cfg.sweep.forces_n.iter().enumerate() {
        let (before, l) = frame_dice(&ph, &local, s, f, 400 + i as u64)?;
        let (_, b) = frame_dice(&ph, &baseline, s, f, 400 + i as u64)?;
        sum_l += l;
        sum_b += b;
        min_l = min_l.min(l);
        cells.push(format!("{f}N {before:.2}/{b:.2}/{l:.2}"));
    }
    let n = cfg.sweep.forces_n.len() as f64;
    let (mean_l, mean_b) = (sum_l / n, sum_b / n);
    Ok(outcome(
        min_l >= 0.85 && mean_l - mean_b >= 0.05,
        format!(
            "stiff-trained on soft at {s} mm: stiffness-based min {min_l:.3} (>=0.85), mean {mean_l:.3} vs force-based {mean_b:.3} (margin >=0.05); deformed/force/stiffness: {}",
            cells.join(", ")
        ),
    ))
}

// 7. Interpolation weights.
fn weights() -> Result<Outcome> {
    let m = StiffnessModel::from_law(ForceLaw::new(0.01, 3.0, 0.5), 8.0);
    let atlas = StiffnessAtlas::new(vec![0.0, 20.0, 40.0], vec![m; 3], 40.0)?;
    let w = atlas.interpolation_weights(10.0)?;
    // Independent evaluation: distances 10, 10, 30 sum to 50, so the raw
    // weights are (5, 5, 5/3) and normalise to (3/7, 3/7, 1/7).
    let hand = [3.0 / 7.0, 3.0 / 7.0, 1.0 / 7.0];
    let hand_ok = w.iter().zip(&hand).all(|(a, b)| (a - b).abs() <= 1e-15);
    let one_hot = (0..3).all(|j| {
        atlas
            .interpolation_weights(20.0 * j as f64)
            .is_ok_and(|w| w.iter().enumerate().all(|(i, &v)| v == if i == j { 1.0 } else { 0.0 }))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..10_000 {
        let mut pos: Vec<f64> = (0..rng.random_range(2..7)).map(|_| rng.random_range(0.0..60.0)).collect();
        pos.sort_by(f64::total_cmp);
        pos.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        if pos.len() < 2 {
            continue;
        }
        let n = pos.len();
        let at = StiffnessAtlas::new(pos, vec![m; n], 60.0)?;
        let w = at.interpolation_weights(rng.random_range(0.0..=60.0))?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(outcome(
        hand_ok && one_hot && worst_sum <= 1e-12,
        format!(
            "sum-to-one worst {worst_sum:.1e} (<=1e-12); one-hot at samples: {one_hot}; hand case (0/20/40 mm, s=10) = ({:.6}, {:.6}, {:.6}) matches 3/7, 3/7, 1/7: {hand_ok} [the often-quoted 0.4375/0.4375/0.125 does not follow from inverse-distance weighting]",
            w[0], w[1], w[2]
        ),
    ))
}

// 8. 3D results over the force ladder.
fn volumes(dir: &Path) -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut stiff_secs = 0.0;
    for name in ["stiff", "soft"] {
        let cfg = PipelineConfig::preset(name)?;
        let t0 = Instant::now();
        let report = run_pipeline(&cfg, &dir.join(name), EXEC)?;
        let dt = t0.elapsed().as_secs_f64();
        if name == "stiff" {
            stiff_secs = dt;
        }
        let levels = &report.volume_3d;
        let mut cells = Vec::new();
        for l in levels {
            let offset_ratio = l.offset_corrected_mm.mean / l.offset_deformed_mm.mean;
            let area_red = l.area_error_reduction();
            ok &= offset_ratio <= 0.5 && area_red >= 0.55;
            cells.push(format!("{}N off {:.2}->{:.2} area-err -{:.0}%", l.force, l.offset_deformed_mm.mean, l.offset_corrected_mm.mean, 100.0 * area_red));
        }
        let sd = |f: &dyn Fn(&uscomp_core::metrics::LevelSummary) -> f64| {
            let v: Vec<f64> = levels.iter().map(f).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
        };
        let (sd_c, sd_d) = (sd(&|l| l.area_corrected_mm2.mean), sd(&|l| l.area_deformed_mm2.mean));
        ok &= sd_c <= sd_d;
        parts.push(format!("{name} [{}; area SD {sd_c:.2} vs {sd_d:.2} mm2; {dt:.0}s]", cells.join(", ")));
    }
    ok &= stiff_secs < 120.0;
    Ok(outcome(ok, format!("{} (offset ratio <=0.5, area error -55%, SD corrected <= deformed, stiff pipeline <120s)", parts.join(" "))))
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(root).expect("prefix").to_string_lossy().into_owned();
                out.insert(key, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

// 9. Determinism.
fn determinism(dir: &Path) -> Result<Outcome> {
    let cfg = PipelineConfig::from_toml_str(
        "preset = \"stiff\"\n[sweep]\nframes = 16\nforces_n = [10.0, 20.0]\n[compounding]\nwrite_forces_n = [10.0, 20.0]\n",
    )?;
    let (a, b) = (dir.join("a"), dir.join("b"));
    run_pipeline(&cfg, &a, EXEC)?;
    run_pipeline(&cfg, &b, Exec::Sequential)?;
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let same = ta == tb;
    let bytes: usize = ta.values().map(Vec::len).sum();
    Ok(outcome(
        same && !ta.is_empty(),
        format!("two runs (parallel, sequential) of one config: {} files, {} bytes, identical: {same}", ta.len(), bytes),
    ))
}

fn main() {
    // `cargo test` passes harness flags; listing mode must not run anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, r: Result<Outcome>| {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!("criterion {n} {}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };

    report(1, "stiffness fit fidelity", stiffness_fit());
    report(2, "optical-flow oracle", optical_flow());
    let t0 = Instant::now();
    match stiff_training() {
        Ok((cfg, ph, tr)) => {
            let train_secs = t0.elapsed().as_secs_f64();
            report(3, "regression invariants", regression_invariants(&cfg, &tr));
            report(4, "in-position 2D correction", in_position(&cfg, &ph, train_secs, &tr));
            report(5, "propagation across positions", propagation());
            report(6, "cross-tissue extrapolation", cross_tissue(&tr));
        }
        Err(e) => {
            for (n, name) in [(3, "regression invariants"), (4, "in-position 2D correction"), (5, "propagation across positions"), (6, "cross-tissue extrapolation")] {
                report(n, name, Err(uscomp_core::Error::Numerical(format!("training failed: {e}"))));
            }
        }
    }
    report(7, "interpolation weights", weights());
    report(8, "3D results", volumes(&tmp.path().join("volumes")));
    report(9, "determinism", determinism(&tmp.path().join("determinism")));
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
