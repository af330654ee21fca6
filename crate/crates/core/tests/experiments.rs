use std::fs;
use std::path::Path;

use bdsde::experiment::{run, ExperimentConfig, Overrides, ALL_EXPERIMENTS};

fn small_config(experiment: &str) -> String {
    let common = r#"
[solver]
starts = { kind = "stratified", radius = 3.0, paths = 200 }
basis = { family = "polynomial", degree = 2 }
"#;
    let body = match experiment {
        "check-conditions" => "[coefficients]\npreset = \"cubic-monotone\"\n[conditions]\nsamples = 500\nterminal_paths = 50\n".to_string(),
        "simulate-forward" => "[coefficients]\npreset = \"ou-flow\"\n[time]\ndt = 0.05\n".to_string(),
        "solve-bdsde" => "[coefficients]\npreset = \"gamma-constant-g\"\n[time]\ndt = 0.02\n".to_string(),
        "drift-ladder" => "[coefficients]\npreset = \"cubic-monotone\"\n[noise]\nlambdas = [1.0, 0.25]\n[time]\ndt = 0.02\n[drift_ladder]\nlevels = [1.0, 2.0, 4.0]\n".to_string(),
        "noise-ladder" => "[coefficients]\ninline = { f_poly = [0.0, -1.0], g = [{ a = 0.5 }, { a = 0.25 }, { a = 0.125 }], terminal = { kind = \"tanh\" } }\n[noise]\nlambdas = [1.0, 1.0, 1.0]\n[time]\ndt = 0.05\n[noise_ladder]\ndims = [1, 2, 3]\nrealizations = 2\n".to_string(),
        "solve-spde" => "[coefficients]\npreset = \"heat\"\n[time]\ndt = 0.02\n[grid]\nradius = 4.0\nstep = 0.1\n".to_string(),
        "correspondence" => "[coefficients]\npreset = \"heat\"\n[time]\ndt = 0.02\n[grid]\nradius = 2.0\nstep = 0.1\n[correspondence]\nstride = 10\n".to_string(),
        "infinite-horizon" => "[coefficients]\npreset = \"linear-mu\"\nparams = { c = 2.0 }\n[time]\ndt = 0.05\n[infinite_horizon]\nhorizons = [1.0, 2.0, 4.0]\n".to_string(),
        "stationarity" => "[coefficients]\npreset = \"linear-mu\"\nparams = { gamma = 0.5 }\n[time]\ndt = 0.05\n[stationarity]\nr = 0.5\nhorizon = 2.0\nmasters = 4\n".to_string(),
        "pullback" => "[coefficients]\npreset = \"linear-mu\"\nparams = { gamma = 0.5, drift = \"ou\", terminal = { kind = \"tanh\" } }\n[time]\ndt = 0.05\n[grid]\nradius = 2.0\nstep = 0.25\n[pullback]\nhorizons = [1.0, 2.0, 4.0]\nmasters = 2\n".to_string(),
        "malliavin" => "[coefficients]\npreset = \"linear-mu\"\nparams = { gamma = 0.5 }\n[time]\ndt = 0.05\n[malliavin]\nthetas = [0.5]\n".to_string(),
        "compactness" => "[coefficients]\npreset = \"heat\"\n[time]\ndt = 0.02\n[grid]\nradius = 3.0\nstep = 0.1\n[compactness]\nrealizations = 1\n".to_string(),
        other => panic!("no config for {other}"),
    };
    format!("experiment = \"{experiment}\"\nseed = 7\n{body}{common}")
}

fn run_in(text: &str, dir: &Path) -> bdsde::Result<bdsde::experiment::RunSummary> {
    let config = ExperimentConfig::from_toml(text)?;
    run(config, &Overrides { seed: None, out: Some(dir.to_path_buf()) })
}

#[test]
fn every_experiment_runs_and_lists_its_files() {
    for kind in ALL_EXPERIMENTS {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_in(&small_config(kind.name()), dir.path())
            .unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
        assert!(summary.files.iter().any(|f| f.ends_with(".csv")), "{}", kind.name());
        let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        for f in &summary.files {
            assert!(dir.path().join(f).exists(), "{f}");
            assert!(manifest.contains(&format!("\"{f}\"")), "{f} missing from manifest");
        }
        let echoed: toml::Value = toml::from_str(&manifest).unwrap();
        assert_eq!(echoed["config"]["experiment"].as_str(), Some(kind.name()));
    }
}

#[test]
fn manifest_echoes_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    run_in(&small_config("drift-ladder"), dir.path()).unwrap();
    let manifest: toml::Value = toml::from_str(&fs::read_to_string(dir.path().join("manifest.toml")).unwrap()).unwrap();
    let ladder = &manifest["config"]["drift_ladder"];
    assert_eq!(ladder["tol"].as_float(), Some(1e-3));
    assert_eq!(manifest["config"]["weight_q"].as_float(), Some(2.0));
    assert_eq!(manifest["config"]["spde"]["boundary"].as_str(), Some("reaction"));
}

#[test]
fn reruns_are_byte_identical() {
    for name in ["solve-bdsde", "drift-ladder", "pullback", "malliavin"] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s = run_in(&small_config(name), a.path()).unwrap();
        run_in(&small_config(name), b.path()).unwrap();
        for f in s.files.iter().filter(|f| f.ends_with(".csv")) {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{name}/{f}");
        }
    }
}

#[test]
fn seed_override_changes_the_noise() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let text = small_config("solve-bdsde");
    run_in(&text, a.path()).unwrap();
    let config = ExperimentConfig::from_toml(&text).unwrap();
    run(config, &Overrides { seed: Some(8), out: Some(b.path().to_path_buf()) }).unwrap();
    assert_ne!(fs::read(a.path().join("noise.csv")).unwrap(), fs::read(b.path().join("noise.csv")).unwrap());
}

#[test]
fn mismatched_correspondence_grids_name_both() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_config("correspondence") + "\n[correspondence.diagonal_grid]\nradius = 2.0\nstep = 0.2\n";
    let err = run_in(&text, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("h=0.1") && msg.contains("h=0.2"), "{msg}");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("error.json")).unwrap()).unwrap();
    assert_eq!(record["exit_code"], 2);
}

#[test]
fn schema_violations_are_config_errors() {
    let unknown = small_config("solve-bdsde") + "\nbogus = 1\n";
    assert_eq!(ExperimentConfig::from_toml(&unknown).unwrap_err().exit_code(), 2);
    let wrong_section = small_config("solve-bdsde") + "\n[pullback]\nmasters = 2\n";
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(&wrong_section, dir.path()).unwrap_err().exit_code(), 2);
    let no_grid = "experiment = \"solve-spde\"\n[coefficients]\npreset = \"heat\"\n";
    assert_eq!(run_in(no_grid, dir.path()).unwrap_err().exit_code(), 2);
    let both = "experiment = \"solve-bdsde\"\n[coefficients]\npreset = \"heat\"\ninline = { terminal = { kind = \"zero\" } }\n";
    assert_eq!(run_in(both, dir.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn numerical_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = "experiment = \"solve-bdsde\"\n[coefficients]\ninline = { f_poly = [0.0, 0.0, 0.0, 1.0], terminal = { kind = \"constant\", value = 5.0 } }\n[time]\ndt = 0.05\n[solver]\nstarts = { kind = \"point\", x = [0.0], paths = 50 }\nbasis = { family = \"polynomial\", degree = 1 }\n";
    let err = run_in(text, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn unwritable_output_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let err = run_in(&small_config("solve-bdsde"), &blocker.join("sub")).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn shipped_configs_load_and_name_their_file() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for kind in ALL_EXPERIMENTS {
        let config = ExperimentConfig::load(&dir.join(format!("{}.toml", kind.name()))).unwrap();
        assert_eq!(config.experiment, kind);
    }
}
