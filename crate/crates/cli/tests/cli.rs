use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
seed = 3
method = "das"

[probe]
num_elements = 16
pitch = 0.000256
center_frequency = 3000000.0
sampling_frequency = 100000000.0
sound_speed = 1540.0

[scan]
depth_start = 0.0645
depth_end = 0.0655
focus_depth = 0.065

[scan.lines]
kind = "sector"
angles = [-0.1, -0.085714, -0.071429, -0.057143, -0.042857, -0.028571, -0.014286, 0.0,
          0.014286, 0.028571, 0.042857, 0.057143, 0.071429, 0.085714, 0.1]

[phantom]
kind = "points"
scatterers = [{ x = 0.0, z = 0.065, amplitude = 1.0 }, { x = 0.002, z = 0.0652, amplitude = 0.5 }]

[simulation]
noise_snr_db = 40.0

[bp]
reg_lambda = 0.5

[ls]
reg_lambda = 0.7

[evaluation]
compare = ["das", "bp", "ls"]

[evaluation.regions.speckle]
shape = "rect"
x = 0.0
z = 0.06475
half_width = 0.003
half_height = 0.0002

[evaluation.regions.target]
shape = "rect"
x = 0.0
z = 0.06525
half_width = 0.003
half_height = 0.0002
"#;

fn usbeam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usbeam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (TempDir, String, String) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = usbeam(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim().split(' ').next(), Some("M=16"));
    let (c, o) = (cfg.to_str().unwrap().to_owned(), out.to_str().unwrap().to_owned());
    (dir, c, o)
}

fn error_line(o: &Output, code: &str) {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: code={code} msg=")), "{err}");
}

#[test]
fn simulate_writes_cube_and_phantom() {
    let (_d, _, out) = setup();
    assert!(Path::new(&out).join("raw.usrf").is_file());
    let phantom = fs::read_to_string(Path::new(&out).join("phantom.toml")).unwrap();
    assert!(phantom.contains("0.0652"));
}

#[test]
fn beamform_writes_image_bmode_and_sidecars() {
    let (_d, cfg, out) = setup();
    let o = usbeam(&["beamform", "--config", &cfg, "--method", "bp", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = Path::new(&out);
    for f in ["bp.usim", "bp.pgm", "bp.pgm.toml", "bp.timing.toml"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let pgm = fs::read(dir.join("bp.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let timing = fs::read_to_string(dir.join("bp.timing.toml")).unwrap();
    assert!(timing.contains("emissions_used = 3"), "{timing}");
}

#[test]
fn metrics_requires_a_reference() {
    let (_d, cfg, out) = setup();
    assert!(usbeam(&["beamform", "--config", &cfg, "--method", "das", "--out", &out]).status.success());
    let img = format!("{out}/das.usim");
    let csv = format!("{out}/m.csv");
    let o = usbeam(&["metrics", &img, "--config", &cfg, "--out", &csv]);
    assert_eq!(o.status.code(), Some(13));
    error_line(&o, "MISSING_REFERENCE");
    assert!(!Path::new(&csv).exists());

    let o = usbeam(&["metrics", &img, "--reference", &img, "--config", &cfg, "--out", &csv]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,emissions_used,cnr,snr,rg"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "das");
    assert_eq!(row[4], "1");
}

#[test]
fn profile_is_csv_in_db() {
    let (_d, cfg, out) = setup();
    assert!(usbeam(&["beamform", "--config", &cfg, "--method", "das", "--out", &out]).status.success());
    let o = usbeam(&["profile", &format!("{out}/das.usim"), "--depth", "0.065", "--average", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 15);
    let max = rows.iter().map(|r| r[2]).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(max, 0.0);
}

#[test]
fn compare_tabulates_all_methods() {
    let (_d, cfg, out) = setup();
    let o = usbeam(&["compare", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = fs::read_to_string(format!("{out}/compare.csv")).unwrap();
    let methods: Vec<&str> = cmp.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["das", "bp", "ls"]);
    assert!(cmp.lines().next().unwrap().ends_with("wall_time_s"));
    let metrics = fs::read_to_string(format!("{out}/metrics.csv")).unwrap();
    assert!(!metrics.contains("wall_time"));
}

#[test]
fn same_seed_same_bytes_across_thread_counts() {
    let (_d, cfg, out) = setup();
    let run = |threads: &str, sub: &str| {
        let dir = format!("{out}/{sub}");
        let o = usbeam(&["--threads", threads, "compare", "--config", &cfg, "--input", &format!("{out}/raw.usrf"), "--out", &dir]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    };
    let a = run("1", "a");
    let b = run("4", "b");
    for f in ["das.usim", "bp.usim", "ls.usim", "metrics.csv", "bp.pgm"] {
        assert_eq!(fs::read(format!("{a}/{f}")).unwrap(), fs::read(format!("{b}/{f}")).unwrap(), "{f}");
    }
}

#[test]
fn mismatched_cube_is_rejected() {
    let (d, cfg, out) = setup();
    let other = d.path().join("other.toml");
    fs::write(&other, TINY.replace("num_elements = 16", "num_elements = 12")).unwrap();
    let o = usbeam(&["beamform", "--config", other.to_str().unwrap(), "--input", &format!("{out}/raw.usrf"), "--out", &out]);
    error_line(&o, "DIMENSION_MISMATCH");
    let _ = cfg;
}

#[test]
fn errors_are_single_lines_with_distinct_codes() {
    let o = usbeam(&["beamform", "--config", "no_such_preset"]);
    assert_eq!(o.status.code(), Some(3));
    error_line(&o, "BAD_CONFIG");

    let o = usbeam(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    error_line(&o, "USAGE");

    let d = TempDir::new().unwrap();
    let bad = d.path().join("bad.usim");
    fs::write(&bad, b"not an image").unwrap();
    let o = usbeam(&["profile", bad.to_str().unwrap(), "--depth", "0.06"]);
    assert_eq!(o.status.code(), Some(5));
    error_line(&o, "BAD_FORMAT");

    let cfg = d.path().join("c.toml");
    fs::write(&cfg, TINY.replace("reg_lambda = 0.5", "reg_lambda = -1.0")).unwrap();
    let o = usbeam(&["compare", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(7), "{}", stderr(&o));
    error_line(&o, "INVALID_PARAMETER");
    assert!(!d.path().join("compare.csv").exists());
}

#[test]
fn help_and_presets_succeed() {
    assert!(usbeam(&["--help"]).status.success());
    let o = usbeam(&["preset", "cyst_desk"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("[evaluation.regions.speckle]"));
}
