use std::path::Path;
use std::process::{Command, Output};

fn uscomp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uscomp"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = uscomp(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn sim_fit_correct_compound_metrics_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (k, pos) in ["5", "20", "35"].iter().enumerate() {
        ok(&["sim", "palpation", "--position", pos, "--steps", "12", "--seed", &k.to_string(), "-o", &format!("p{k}")], d);
    }
    let csv = ok(&["fit-stiffness", "p0", "p1", "p2"], d);
    assert_eq!(csv.lines().count(), 4, "{csv}");

    ok(&["track", "p0", "--points", "20", "-o", "tracks.csv"], d);
    assert!(d.join("tracks.csv").is_file());

    ok(&["fit", "p0", "p1", "p2", "--training", "0", "-o", "model.toml"], d);
    ok(&["sim", "sweep", "--force", "0", "--frames", "12", "--seed", "9", "-o", "truth"], d);
    ok(&["sim", "sweep", "--force", "20", "--frames", "12", "--seed", "9", "-o", "deformed"], d);
    ok(&["correct", "deformed", "model.toml", "-o", "corrected"], d);

    ok(&["compound", "corrected", "--spacing", "0.5", "-o", "vol"], d);
    for f in ["volume.raw", "weight.raw", "volume.toml", "axial.pgm", "coronal.pgm"] {
        assert!(d.join("vol").join(f).is_file(), "missing {f}");
    }

    let table = ok(&["metrics", "truth", "deformed", "corrected", "--frames", "4", "-o", "m.csv"], d);
    assert!(table.contains("20"), "{table}");
    let rows = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // Unknown phantom preset.
    let out = uscomp(&["sim", "sweep", "--preset", "granite", "--force", "5", "-o", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    // Negative force.
    let out = uscomp(&["sim", "palpation", "--position", "10", "--max-force", "-3", "-o", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    // Unknown config key.
    std::fs::write(d.join("bad.toml"), "preset = \"stiff\"\n[sweep]\nframez = 3\n").unwrap();
    let out = uscomp(&["pipeline", "--config", "bad.toml", "-o", "run"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_recording_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uscomp(&["compound", "nowhere", "-o", "vol"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.toml"));
}
