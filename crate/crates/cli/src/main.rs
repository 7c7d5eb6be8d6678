use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use uscomp_core::compounding::{compound, Plane, Volume, DEFAULT_SPACING_MM};
use uscomp_core::correction::correct_sweep;
use uscomp_core::error::ErrorClass;
use uscomp_core::io::{read_sweep, save_pgm, write_sweep};
use uscomp_core::metrics::{evaluate_sweeps, sample_frames, summary_table, MetricsReport, SegmentParams};
use uscomp_core::optical_flow::{select_features, track_sequence, tracks_to_csv};
use uscomp_core::pipeline::{fit_model, run_pipeline, site_stiffness, PipelineConfig, PipelineReport};
use uscomp_core::propagation::{Binding, CorrectionModel};
use uscomp_core::simulator::{Phantom, PhantomSpec};
use uscomp_core::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "uscomp", version, about = "Probe-pressure deformation correction for tracked ultrasound sweeps")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a palpation or a sweep on a synthetic phantom.
    Sim {
        #[command(subcommand)]
        kind: SimKind,
    },
    /// Track features through a palpation and dump them as CSV.
    Track {
        palpation: PathBuf,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fit the force/indentation law of one or more palpations.
    FitStiffness { palpations: Vec<PathBuf> },
    /// Fit the displacement regression and stiffness atlas; writes a model file.
    Fit {
        /// Palpation recordings, one per site.
        #[arg(required = true)]
        palpations: Vec<PathBuf>,
        /// Index of the palpation that trains the regression.
        #[arg(long, default_value_t = 0)]
        training: usize,
        /// Pipeline config supplying tracking and regression settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Flexible layer thickness, mm.
        #[arg(long, default_value_t = 40.0)]
        layer_thickness: f64,
        /// Trajectory length, mm (defaults to the first manifest's path length).
        #[arg(long)]
        path_length: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Correct every frame of a sweep with a model file.
    #[command(alias = "correct")]
    SweepCorrect {
        sweep: PathBuf,
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = BindingArg::Local)]
        binding: BindingArg,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compound a sweep into a volume and export its central slices.
    Compound {
        sweep: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SPACING_MM)]
        spacing: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-frame dice, centroid offset and area against a ground-truth sweep.
    Metrics {
        truth: PathBuf,
        deformed: PathBuf,
        corrected: PathBuf,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the summary of a finished pipeline run.
    Report { run: PathBuf },
    /// Run the whole experiment.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Phantom preset when no config file is given.
        #[arg(long, default_value = "stiff")]
        preset: String,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum SimKind {
    Palpation {
        #[command(flatten)]
        phantom: PhantomArg,
        /// Site along the path, mm.
        #[arg(long)]
        position: f64,
        #[arg(long, default_value_t = 25.0)]
        max_force: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    Sweep {
        #[command(flatten)]
        phantom: PhantomArg,
        /// Contact force setpoint, N.
        #[arg(long)]
        force: f64,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Path length, mm (defaults to the phantom's).
        #[arg(long)]
        path_length: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct PhantomArg {
    /// Built-in phantom: stiff or soft.
    #[arg(long, default_value = "stiff")]
    preset: String,
    /// Phantom description file, overriding the preset.
    #[arg(long)]
    phantom: Option<PathBuf>,
}

impl PhantomArg {
    fn spec(&self) -> Result<PhantomSpec> {
        match &self.phantom {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let spec: PhantomSpec = toml_from(&text, p)?;
                spec.validate()?;
                Ok(spec)
            }
            None => PhantomSpec::preset(&self.preset),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BindingArg {
    /// Local stiffness from the atlas.
    Local,
    /// Training stiffness everywhere (force-based baseline).
    Training,
}

impl From<BindingArg> for Binding {
    fn from(b: BindingArg) -> Self {
        match b {
            BindingArg::Local => Binding::LocalStiffness,
            BindingArg::Training => Binding::TrainingStiffness,
        }
    }
}

fn toml_from<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Sim { kind } => match kind {
            SimKind::Palpation { phantom, position, max_force, steps, seed, output } => {
                let ph = Phantom::new(phantom.spec()?)?;
                let rec = ph.palpation(position, max_force, steps, seed, exec)?;
                write_sweep(&rec, &output)?;
                info!("wrote {} frames to {}", rec.frames.len(), output.display());
            }
            SimKind::Sweep { phantom, force, frames, path_length, seed, output } => {
                let spec = phantom.spec()?;
                let len = path_length.unwrap_or(spec.path_length_mm);
                let rec = Phantom::new(spec)?.sweep(force, len, frames, seed, exec)?;
                write_sweep(&rec, &output)?;
                info!("wrote {} frames to {}", rec.frames.len(), output.display());
            }
        },
        Command::Track { palpation, points, output } => {
            let rec = read_sweep(&palpation)?;
            let frames: Vec<_> = rec.frames.iter().map(|f| f.float_image()).collect();
            let params = uscomp_core::optical_flow::FeatureParams { n_points: points, ..Default::default() };
            let pts = select_features(&frames[0], &params)?;
            let tracks = track_sequence(&frames, &pts, &Default::default(), exec)?;
            let csv = tracks_to_csv(&tracks);
            match output {
                Some(p) => write_file(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::FitStiffness { palpations } => {
            println!("position_mm,c1,c2,c3,r2,kd_mean_n_per_m,kd_sd_n_per_m");
            for p in palpations {
                let s = site_stiffness(&read_sweep(&p)?)?;
                println!(
                    "{},{},{},{},{},{},{}",
                    s.position_mm,
                    s.model.c1,
                    s.model.c2,
                    s.model.c3,
                    s.model.fit_r2,
                    s.kd_mean * 1e3,
                    s.kd_sd * 1e3
                );
            }
        }
        Command::Fit { palpations, training, config, layer_thickness, path_length, output } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::preset("stiff")?,
            };
            let recs = palpations.iter().map(read_sweep).collect::<Result<Vec<_>>>()?;
            let len = path_length.unwrap_or(recs[0].manifest.acquisition.path_length_mm);
            let t = fit_model(recs, training, layer_thickness, len, &cfg.tracking, &cfg.regression, exec)?;
            t.model.save(&output)?;
            info!("model written to {}", output.display());
        }
        Command::SweepCorrect { sweep, model, binding, output } => {
            let rec = read_sweep(&sweep)?;
            let model = CorrectionModel::load(&model)?;
            let corrected = correct_sweep(&rec, &model, binding.into(), exec)?;
            write_sweep(&corrected, &output)?;
        }
        Command::Compound { sweep, spacing, output } => {
            let rec = read_sweep(&sweep)?;
            let vol = compound(&rec, spacing, exec)?;
            vol.write(&output)?;
            export_slices(&vol, &output)?;
            info!("volume {:?} at {} mm written to {}", vol.grid.dims, spacing, output.display());
        }
        Command::Metrics { truth, deformed, corrected, frames, seed, output } => {
            let (t, d, c) = (read_sweep(&truth)?, read_sweep(&deformed)?, read_sweep(&corrected)?);
            let idx = sample_frames(t.frames.len(), frames, seed);
            let rows = evaluate_sweeps(&t, &d, &c, &idx, &SegmentParams::default(), exec)?;
            let report = MetricsReport { rows };
            if let Some(p) = output {
                write_file(&p, &report.to_csv())?;
            }
            print!("{}", summary_table(&report.summarize_by(|r| r.force)));
        }
        Command::Report { run } => {
            let p = run.join("report").join("report.toml");
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let report: PipelineReport = toml_from(&text, &p)?;
            print!("{}", report.render());
        }
        Command::Pipeline { config, preset, output } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::preset(&preset)?,
            };
            let report = run_pipeline(&cfg, &output, exec)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

/// Central axial and coronal slices as 8-bit graymaps.
fn export_slices(vol: &Volume, dir: &Path) -> Result<()> {
    for (plane, name) in [(Plane::Axial, "axial"), (Plane::Coronal, "coronal")] {
        let s = vol.extract_slice(plane, vol.slice_count(plane) / 2)?;
        save_pgm(&dir.join(format!("{name}.pgm")), &s.image.to_gray())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 1,
            })
        }
    }
}
