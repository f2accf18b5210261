use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eguide::chip::{self, SplitterProfile};
use eguide::io::{read_layout, LayoutFile};
use eguide::pseudopot::{find_transverse_minimum, DriveParams, MinimumOptions, ParticleSpecies};
use serde_json::Value;

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn eguide(args: &[&str], env_workers: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_eguide"));
    c.args(args);
    match env_workers {
        Some(w) => c.env("EGUIDE_WORKERS", w),
        None => c.env_remove("EGUIDE_WORKERS"),
    };
    c.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn missing_or_empty_config_prints_usage() {
    let out = eguide(&[], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "empty.json", "");
    let out = eguide(&["--config", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn config_errors_exit_with_two_and_locate_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\n  \"track\": {\n    \"drfit_mm\": 3\n  }\n}\n");
    let out = eguide(&["track", "--config", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("drfit_mm") && err.contains("line 3"), "{err}");

    let cfg = write(dir.path(), "neg.json", r#"{"drive": {"frequency_ghz": -1}}"#);
    assert_eq!(eguide(&["field-map", "--config", &cfg], None).status.code(), Some(2));
    assert_eq!(eguide(&["no-such-command"], None).status.code(), Some(2));
    let cfg = write(dir.path(), "which.json", r#"{"subcommand": "eigen"}"#);
    assert_eq!(eguide(&["track", "--config", &cfg], None).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "off.json",
        r#"{"layout": "builtin:quadrupole", "track": {"source": {"center_um": [0, 0, 9000], "rays": 1, "phases": 1}}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = eguide(&["track", "--config", &cfg, "-o", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tracker"));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["summary"]["error"]["module"], "tracker");
}

#[test]
fn field_map_minimum_matches_direct_search() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = assets().join("configs/field_map.json");
    let out = eguide(&["--config", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("pseudo_map.csv"));
    let (mut best, mut bx, mut bz) = (f64::INFINITY, 0.0, 0.0);
    for r in &rows {
        let v: f64 = r[2].parse().unwrap();
        if v < best {
            (best, bx, bz) = (v, r[0].parse().unwrap(), r[1].parse().unwrap());
        }
    }
    let layout = read_layout(&assets().join("quadrupole_layout.json")).unwrap();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let m = find_transverse_minimum(&layout, &d, &e, 10e-3, (bx * 1e-6, bz * 1e-6), &MinimumOptions::default()).unwrap();
    let mins = read_csv(&dir.path().join("minimum.csv"));
    let refined: Vec<f64> = mins[1][1..].iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(mins[1][0], "refined");
    assert!((refined[0] - m.x * 1e6).abs() < 1e-6 && (refined[1] - m.z * 1e6).abs() < 1e-6);
    assert!((refined[2] - m.psi).abs() <= 1e-12 * best.max(1e-12));
    // The refined minimum lies inside the grid cell around the coarse one.
    let dz = 750.0 / 60.0;
    assert!((refined[1] - bz).abs() <= dz && (refined[0] - bx).abs() <= 20.0);
    assert!(m.psi <= best);
}

#[test]
fn outputs_are_deterministic_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"layout": "builtin:quadrupole", "track": {"source": {"rays": 6, "phases": 2}, "cache_spacing_um": 0}}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(eguide(&["track", "--config", &cfg, "-o", a.to_str().unwrap()], Some("1")).status.success());
    assert!(eguide(&["track", "--config", &cfg, "-o", b.to_str().unwrap()], Some("3")).status.success());
    for f in ["trajectories.csv", "detector.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let eig = assets().join("configs/eigen.json");
    let c = dir.path().join("c");
    let d = dir.path().join("d");
    assert!(eguide(&["--config", eig.to_str().unwrap(), "-o", c.to_str().unwrap(), "-w", "1"], None).status.success());
    assert!(eguide(&["--config", eig.to_str().unwrap(), "-o", d.to_str().unwrap(), "-w", "2"], None).status.success());
    for f in ["spectrum.csv", "modes.csv"] {
        assert_eq!(std::fs::read(c.join(f)).unwrap(), std::fs::read(d.join(f)).unwrap(), "{f}");
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(c.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["workers"], 1);
}

#[test]
fn metadata_echoes_config_and_units() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "u.json",
        r#"{"layout": "builtin:quadrupole", "seed": 42, "drive": {"frequency_ghz": 1.234567891, "amplitude_v": 12.5},
            "field_map": {"nx": 5, "nz": 5}}"#,
    );
    let out = dir.path().join("o");
    assert!(eguide(&["field-map", "--config", &cfg, "-o", out.to_str().unwrap()], None).status.success());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 42);
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    assert!(meta["wall_time_s"].as_f64().unwrap() >= 0.0);
    let ghz = meta["si"]["drive_omega_rad_s"].as_f64().unwrap() / (2.0 * std::f64::consts::PI * 1e9);
    assert!((ghz - 1.234567891).abs() <= 1e-12 * 1.234567891);
    assert_eq!(meta["si"]["drive_v0"].as_f64().unwrap(), 12.5);
    let echoed = &meta["config"];
    assert_eq!(echoed["drive"]["frequency_ghz"].as_f64().unwrap(), 1.234567891);
    assert_eq!(echoed["field_map"]["x_half_width_um"].as_f64().unwrap(), 600.0);
    // The echoed config is itself a valid config for the same run.
    let again = write(dir.path(), "again.json", &echoed.to_string());
    let out2 = dir.path().join("o2");
    assert!(eguide(&["--config", &again, "-o", out2.to_str().unwrap()], None).status.success());
    assert_eq!(std::fs::read(out.join("pseudo_map.csv")).unwrap(), std::fs::read(out2.join("pseudo_map.csv")).unwrap());
}

#[test]
fn shipped_layouts_match_their_builders() {
    let file: LayoutFile = serde_json::from_str(&std::fs::read_to_string(assets().join("reconstructed_layout.json")).unwrap()).unwrap();
    assert_eq!(file, LayoutFile { name: file.name.clone(), ..LayoutFile::from_layout("", &chip::reconstructed_layout()) });
    let file: LayoutFile = serde_json::from_str(&std::fs::read_to_string(assets().join("quadrupole_layout.json")).unwrap()).unwrap();
    let built = SplitterProfile::straight_quadrupole(20e-3).build().unwrap();
    assert_eq!(file, LayoutFile { name: file.name.clone(), ..LayoutFile::from_layout("", &built) });
}

#[test]
fn every_shipped_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = write(dir.path(), "b.json", r#"{"subcommand": "eigen", "quantum": {"potential": {"quartic": {"alpha_mrad": 0.1}}}}"#);
    assert_eq!(eguide(&["--config", &bogus], None).status.code(), Some(2));
    for entry in std::fs::read_dir(assets().join("configs")).unwrap() {
        let p = entry.unwrap().path();
        let out = eguide(&["--check", "--config", p.to_str().unwrap()], None);
        assert!(out.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v["subcommand"].is_string());
    }
}
