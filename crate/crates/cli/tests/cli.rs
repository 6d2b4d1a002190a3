use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn atphonon(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atphonon")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn spectrum_writes_csv_fit_and_manifest() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["spectrum"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let (header, rows) = csv_rows(&dir.path().join("spectrum.csv"));
    assert_eq!(header, ["detuning_hz", "p_excited", "counts", "shots"]);
    assert_eq!(rows.len(), 161);
    for r in &rows {
        let p: f64 = r[1].parse().unwrap();
        let k: u64 = r[2].parse().unwrap();
        let n: u64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(k <= n);
        assert_eq!(n, 100);
    }

    let fit = json(&dir.path().join("fit.json"));
    assert_eq!(fit["resolved_peaks"], 2);
    let s = fit["splitting_hz"].as_f64().unwrap();
    assert!((s - 20_100.0).abs() < 300.0, "splitting {s}");
    for key in ["splitting_err_hz", "background", "residual_norm", "iterations"] {
        assert!(fit.get(key).is_some(), "fit.json lacks {key}");
    }
    for p in fit["peaks"].as_array().unwrap() {
        for key in ["center_hz", "center_err_hz", "amplitude", "amplitude_err", "width_hz", "width_err_hz"] {
            assert!(p[key].is_f64(), "peak lacks {key}");
        }
    }

    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "spectrum");
    assert_eq!(m["seed"], 1);
    assert_eq!(m["status"], "ok");
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for f in ["resolved_config.toml", "spectrum.csv", "fit.json"] {
        assert!(outputs.contains(&f), "manifest misses {f}");
    }
}

#[test]
fn json_format_and_resolved_config_reproduce_the_run() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("a");
    let o = atphonon(&["spectrum", "--format", "json", "--seed", "9", "--set", "scan.n_points=81"], &first);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec = json(&first.join("spectrum.json"));
    assert_eq!(spec["detuning_hz"].as_array().unwrap().len(), 81);
    assert_eq!(spec["counts"].as_array().unwrap().len(), 81);

    let second = dir.path().join("b");
    let cfg = first.join("resolved_config.toml");
    let o = atphonon(&["--config", cfg.to_str().unwrap(), "spectrum"], &second);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["spectrum.json", "fit.json", "resolved_config.toml"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn switching_off_the_coupling_leaves_one_peak() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["spectrum", "--set", "system.omega_c=0"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let fit = json(&dir.path().join("fit.json"));
    assert_eq!(fit["resolved_peaks"], 1);
    assert_eq!(fit["splitting_hz"].as_f64(), Some(0.0));
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 3\n[system\neta = 0.1\n").unwrap();
    let o = atphonon(&["--config", cfg.to_str().unwrap(), "spectrum"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2, column 8"), "{}", stderr(&o));
}

#[test]
fn unknown_and_conflicting_keys_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[system]\netta = 0.1\n").unwrap();
    let o = atphonon(&["--config", cfg.to_str().unwrap(), "spectrum"], &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("etta"));

    let o = atphonon(&["spectrum", "--set", "system.omega0=5", "--set", "system.omega_c=0"], &dir.path().join("b"));
    assert_eq!(o.status.code(), Some(2));

    let o = atphonon(&["detect", "--prepared", ""], &dir.path().join("c"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-empty"));
}

#[test]
fn truncation_leak_exits_3() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["spectrum", "--n-bar", "3", "--set", "system.fock_dim=8"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("truncation"));
}

#[test]
fn fit_failure_exits_4_and_keeps_the_spectrum() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["spectrum", "--set", "scan.detuning_min=-2000", "--set", "scan.detuning_max=2000"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(dir.path().join("spectrum.csv").exists());
    assert!(!dir.path().join("fit.json").exists());
    let m = json(&dir.path().join("manifest.json"));
    assert!(m["status"].as_str().unwrap().contains("fit"));
}

#[test]
fn detect_writes_response_and_shots() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["detect", "--prepared", "0..=2", "--probed", "0,1,2", "--set", "detect.shots=20"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("response.json"));
    assert_eq!(r["positive_outcome"], "bright");
    assert_eq!(r["diagonally_dominant"], true);
    let p = r["probabilities"].as_array().unwrap();
    assert_eq!(p.len(), 3);
    assert!(p[0][0].as_f64().unwrap() > 0.95);
    assert!(p.iter().all(|row| row.as_array().unwrap().len() == 3));
    let (header, rows) = csv_rows(&dir.path().join("shots.csv"));
    assert_eq!(header, ["prepared", "probed", "shot", "outcome"]);
    assert_eq!(rows.len(), 3 * 3 * 20);
    assert!(rows.iter().all(|r| r[3] == "bright" || r[3] == "dark"));
    // counts agree with the per-shot records
    let counts = r["counts"].as_array().unwrap();
    for (i, row) in counts.iter().enumerate() {
        for (j, k) in row.as_array().unwrap().iter().enumerate() {
            let n = rows.iter().filter(|r| r[0] == i.to_string() && r[1] == j.to_string() && r[3] == "bright").count();
            assert_eq!(k.as_u64().unwrap() as usize, n);
        }
    }
}

#[test]
fn qnd_variant_counts_dark_outcomes() {
    let dir = TempDir::new().unwrap();
    let o =
        atphonon(&["detect", "--variant", "qnd", "--prepared", "1", "--probed", "1", "--format", "json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("response.json"));
    assert_eq!(r["variant"], "qnd");
    assert_eq!(r["positive_outcome"], "dark");
    let shots = json(&dir.path().join("shots.json"));
    assert_eq!(shots.as_array().unwrap().len(), 100);
}

#[test]
fn scaling_table_and_fit() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["scaling", "--n", "0..=3", "--set", "scan.n_points=81"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&dir.path().join("scaling.csv"));
    assert_eq!(header, ["n", "splitting_hz", "sigma_hz"]);
    assert_eq!(rows.len(), 4);
    let s = json(&dir.path().join("scaling.json"));
    let e = s["fit"]["exponent"].as_f64().unwrap();
    assert!((e - 0.5).abs() < 0.05, "exponent {e}");
}

#[test]
fn rsb_scaling_flags_n0_and_skips_a_short_fit() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["scaling", "--regime", "rsb", "--n", "0..=2", "--set", "scan.n_points=81"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&dir.path().join("scaling.json"));
    assert_eq!(s["points"][0]["flag"], "no sideband coupling");
    assert!(s["fit"].is_null());
    assert!(s["note"].as_str().unwrap().contains("2 usable"));
}

#[test]
fn thermal_raises_truncation_and_reports() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["thermal", "--n-bar", "0.81", "--set", "scan.n_points=101"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&dir.path().join("thermal.json"));
    let dim = t["fock_dim"].as_u64().unwrap();
    assert!(dim > 20);
    let resolved = fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    assert!(resolved.contains(&format!("fock_dim = {dim}")));
    let pops = t["populations"].as_array().unwrap();
    assert_eq!(pops.len(), t["n_max"].as_u64().unwrap() as usize + 1);
    let total: f64 = pops.iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(t["n_bar_fit"].as_f64().unwrap() > 0.0);
    let p: Vec<f64> = pops.iter().map(|p| p.as_f64().unwrap()).collect();
    assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
}

#[test]
fn thermal_ground_state_is_the_fock_0_reconstruction() {
    let dir = TempDir::new().unwrap();
    let args = ["thermal", "--n-bar", "0", "--set", "scan.n_points=101", "--set", "fit.source=\"probability\""];
    let o = atphonon(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&dir.path().join("thermal.json"));
    assert!(t["populations"][0].as_f64().unwrap() > 0.99);
    assert!(t["n_bar_fit"].as_f64().unwrap() < 1e-6);
}

#[test]
fn thermal_resolves_several_pairs_at_2_23() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["thermal", "--n-bar", "2.23", "--set", "scan.n_points=81"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&dir.path().join("thermal.json"));
    assert!(t["resolvable_pairs"].as_u64().unwrap() >= 4);
}

#[test]
fn unresolvable_thermal_peaks_exit_4() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["thermal", "--n-bar", "0.81", "--n-max", "4", "--set", "system.omega0=2000"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("not resolvable"));
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("a");
    let o = atphonon(&["spectrum", "--n-bar", "0.2", "--seed", "31", "--set", "scan.n_points=81"], &first);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&first.join("manifest.json"));
    let cfg = dir.path().join("from_manifest.toml");
    fs::write(&cfg, toml::to_string(&m["config"]).unwrap()).unwrap();
    let second = dir.path().join("b");
    let o = atphonon(&["--config", cfg.to_str().unwrap(), "spectrum"], &second);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["spectrum.csv", "fit.json", "manifest.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn run_sequence_example_config() {
    let dir = TempDir::new().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fock_probe.toml");
    let o = atphonon(&["--config", cfg.to_str().unwrap(), "run-sequence"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let records = json(&dir.path().join("sequence.json"));
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 4);
    for r in records {
        assert_eq!(r["outcomes"].as_array().unwrap().len(), 1);
        let pops: f64 = r["fock_populations"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((pops - 1.0).abs() < 1e-9);
    }
}

#[test]
fn empty_sequence_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = atphonon(&["run-sequence"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
