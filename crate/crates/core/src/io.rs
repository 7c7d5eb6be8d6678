//! On-disk sweep recordings.
//!
//! A recording directory holds
//!
//! ```text
//! manifest.toml      calibration + acquisition metadata
//! log.csv            timestamp, force, 12 pose numbers (row-major [R | t])
//! frames/000001.pgm  8-bit binary graymaps, one per log row
//! masks/000001.pgm   optional validity masks (0 = invalid)
//! ```
//!
//! Rows of `log.csv` are associated with frame files by index. Floats are
//! written in shortest round-trip form, so a write/read cycle is bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationParams, Pose};
use crate::error::{Error, LoadError, Result};
use crate::imaging::FloatImage;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LOG_FILE: &str = "log.csv";
pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const FORMAT_VERSION: u32 = 1;

/// Largest lateral drift tolerated inside a palpation recording, mm.
pub const PALPATION_DRIFT_TOLERANCE: f64 = 1.0;

const LOG_HEADER: [&str; 14] = [
    "timestamp", "force", "r00", "r01", "r02", "t0", "r10", "r11", "r12", "t1", "r20", "r21", "r22",
    "t2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordingKind {
    Palpation,
    Sweep,
}

/// Acquisition metadata. The trajectory is the straight line
/// `origin + s·direction` traced by the probe origin at zero indentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acquisition {
    pub frame_rate_hz: f64,
    pub trajectory_origin: [f64; 3],
    pub trajectory_direction: [f64; 3],
    pub path_length_mm: f64,
    /// Arc-length position of a palpation, mm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_mm: Option<f64>,
    /// Commanded contact force of a constant-force sweep, N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_setpoint_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Set when frames have been deformation-corrected.
    #[serde(default)]
    pub corrected: bool,
}

impl Acquisition {
    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.trajectory_origin)
    }

    pub fn direction(&self) -> Vector3<f64> {
        Vector3::from(self.trajectory_direction).normalize()
    }

    /// Arc-length position of a probe pose projected on the trajectory.
    pub fn arc_position(&self, pose: &Pose) -> f64 {
        (pose.translation - self.origin()).dot(&self.direction())
    }

    /// Probe displacement along its beam axis relative to the trajectory.
    pub fn pose_indentation(&self, pose: &Pose) -> f64 {
        let s = self.arc_position(pose);
        let on_path = self.origin() + self.direction() * s;
        (pose.translation - on_path).dot(&pose.beam_axis())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    pub format_version: u32,
    pub phantom_id: String,
    pub kind: RecordingKind,
    pub frame_count: usize,
    pub calibration: CalibrationParams,
    pub acquisition: Acquisition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub image: GrayImage,
    /// Contact force, N.
    pub force: f64,
    pub pose: Pose,
    /// Validity mask (non-zero = valid), present on corrected frames.
    pub mask: Option<GrayImage>,
}

impl Frame {
    pub fn float_image(&self) -> FloatImage {
        FloatImage::from_gray(&self.image)
    }

    pub fn valid_mask(&self) -> Option<Vec<bool>> {
        self.mask.as_ref().map(|m| m.as_raw().iter().map(|&v| v != 0).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecording {
    pub manifest: SweepManifest,
    pub frames: Vec<Frame>,
}

impl SweepRecording {
    pub fn new(
        phantom_id: impl Into<String>,
        kind: RecordingKind,
        calibration: CalibrationParams,
        acquisition: Acquisition,
        frames: Vec<Frame>,
    ) -> Self {
        Self {
            manifest: SweepManifest {
                format_version: FORMAT_VERSION,
                phantom_id: phantom_id.into(),
                kind,
                frame_count: frames.len(),
                calibration,
                acquisition,
            },
            frames,
        }
    }

    pub fn kind(&self) -> RecordingKind {
        self.manifest.kind
    }

    pub fn calibration(&self) -> &CalibrationParams {
        &self.manifest.calibration
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        let m = &self.manifest;
        let malformed = |what: &str, detail: String| LoadError::Malformed {
            what: what.into(),
            detail,
        };
        m.calibration
            .validate()
            .map_err(|e| malformed("calibration", e.to_string()))?;
        if self.frames.len() < 2 {
            return Err(LoadError::TooFewFrames(self.frames.len()));
        }
        if m.frame_count != self.frames.len() {
            return Err(LoadError::RowCountMismatch {
                log: self.frames.len(),
                frames: m.frame_count,
            });
        }
        let acq = &m.acquisition;
        let dir = Vector3::from(acq.trajectory_direction);
        if !(dir.norm() > 0.0 && dir.iter().chain(acq.trajectory_origin.iter()).all(|v| v.is_finite())) {
            return Err(malformed("acquisition", "trajectory direction must be a finite non-zero vector".into()));
        }
        if !(acq.frame_rate_hz > 0.0 && acq.path_length_mm >= 0.0) {
            return Err(malformed("acquisition", "frame rate must be > 0 and path length >= 0".into()));
        }
        let expected = m.calibration.dims();
        let mut prev_t = f64::NEG_INFINITY;
        for (i, f) in self.frames.iter().enumerate() {
            let found = f.image.dimensions();
            if found != expected {
                return Err(LoadError::DimensionMismatch { frame: i, expected, found });
            }
            if let Some(mask) = &f.mask {
                if mask.dimensions() != expected {
                    return Err(LoadError::DimensionMismatch {
                        frame: i,
                        expected,
                        found: mask.dimensions(),
                    });
                }
            }
            if !(f.timestamp.is_finite() && f.timestamp > prev_t) {
                return Err(LoadError::NonMonotoneTimestamps { frame: i });
            }
            prev_t = f.timestamp;
            if !(f.force.is_finite() && f.force >= 0.0) {
                return Err(LoadError::NegativeForce { frame: i, force: f.force });
            }
            if !f.pose.is_proper_rotation() {
                return Err(LoadError::NonOrthonormalPose { frame: i });
            }
        }
        if m.kind == RecordingKind::Palpation {
            let p0 = self.frames[0].pose.translation;
            let axis = self.frames[0].pose.beam_axis();
            for (i, f) in self.frames.iter().enumerate() {
                let d = f.pose.translation - p0;
                let lateral = (d - axis * d.dot(&axis)).norm();
                if lateral > PALPATION_DRIFT_TOLERANCE {
                    return Err(malformed(
                        "palpation",
                        format!("probe drifts {lateral:.3} mm off the press axis at frame {i}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn frame_name(i: usize) -> String {
    format!("{:06}.pgm", i + 1)
}

fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    if !path.is_file() {
        return Err(LoadError::MissingFile(path.to_path_buf()).into());
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| LoadError::Malformed {
            what: path.display().to_string(),
            detail: e.to_string(),
        })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(LoadError::Malformed {
            what: path.display().to_string(),
            detail: format!("expected 8-bit graymap, found {:?}", other.color()),
        }
        .into()),
    }
}

pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_pgm(path, img)
}

/// Removes graymaps left over from an earlier, longer recording.
fn clear_pgms(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Validates and writes `rec` into directory `path`.
pub fn write_sweep(rec: &SweepRecording, path: impl AsRef<Path>) -> Result<()> {
    let root = path.as_ref();
    rec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let manifest = toml::to_string(&rec.manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    let mpath = root.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    let lpath = root.join(LOG_FILE);
    let mut log = csv::Writer::from_path(&lpath).map_err(|e| csv_error(&lpath, e))?;
    log.write_record(LOG_HEADER).map_err(|e| csv_error(&lpath, e))?;
    for f in &rec.frames {
        let mut row = vec![f.timestamp.to_string(), f.force.to_string()];
        row.extend(f.pose.to_row_major().iter().map(|v| v.to_string()));
        log.write_record(&row).map_err(|e| csv_error(&lpath, e))?;
    }
    log.flush().map_err(|e| Error::io(&lpath, e))?;

    let frames = root.join(FRAMES_DIR);
    let masks = root.join(MASKS_DIR);
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    clear_pgms(&frames)?;
    clear_pgms(&masks)?;
    let has_masks = rec.frames.iter().any(|f| f.mask.is_some());
    if has_masks {
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    for (i, f) in rec.frames.iter().enumerate() {
        write_pgm(&frames.join(frame_name(i)), &f.image)?;
        if let Some(m) = &f.mask {
            write_pgm(&masks.join(frame_name(i)), m)?;
        }
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        LoadError::Malformed {
            what: path.display().to_string(),
            detail: e.to_string(),
        }
        .into()
    }
}

/// Reads and fully validates a recording directory.
pub fn read_sweep(path: impl AsRef<Path>) -> Result<SweepRecording> {
    let root = path.as_ref();
    let mpath = root.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(LoadError::MissingFile(mpath).into());
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: SweepManifest = toml::from_str(&text).map_err(|e| LoadError::Malformed {
        what: MANIFEST_FILE.into(),
        detail: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(LoadError::Malformed {
            what: MANIFEST_FILE.into(),
            detail: format!("unsupported format version {}", manifest.format_version),
        }
        .into());
    }

    let lpath = root.join(LOG_FILE);
    if !lpath.is_file() {
        return Err(LoadError::MissingFile(lpath).into());
    }
    let rows = read_log(&lpath)?;
    if rows.len() != manifest.frame_count {
        return Err(LoadError::RowCountMismatch {
            log: rows.len(),
            frames: manifest.frame_count,
        }
        .into());
    }

    let masks_dir = root.join(MASKS_DIR);
    let has_masks = masks_dir.is_dir();
    let mut frames = Vec::with_capacity(rows.len());
    for (i, (timestamp, force, pose)) in rows.into_iter().enumerate() {
        let image = read_pgm(&root.join(FRAMES_DIR).join(frame_name(i)))?;
        let mask = if has_masks {
            Some(read_pgm(&masks_dir.join(frame_name(i)))?)
        } else {
            None
        };
        frames.push(Frame {
            timestamp,
            image,
            force,
            pose,
            mask,
        });
    }
    let rec = SweepRecording { manifest, frames };
    rec.validate()?;
    Ok(rec)
}

fn read_log(path: &PathBuf) -> Result<Vec<(f64, f64, Pose)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(LOG_HEADER.iter().copied()) {
        return Err(LoadError::Malformed {
            what: LOG_FILE.into(),
            detail: format!("unexpected header {header:?}"),
        }
        .into());
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LoadError::Malformed {
                what: LOG_FILE.into(),
                detail: format!("row {}: {e}", i + 1),
            })?;
        let mut pose = [0.0; 12];
        pose.copy_from_slice(&vals[2..14]);
        rows.push((vals[0], vals[1], Pose::from_row_major(&pose)));
    }
    Ok(rows)
}
