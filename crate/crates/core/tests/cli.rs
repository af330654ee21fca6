use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdsde"))
}

const SOLVE: &str = r#"experiment = "solve-bdsde"
seed = 42
[coefficients]
preset = "gamma-constant-g"
[time]
dt = 0.02
[solver]
starts = { kind = "stratified", radius = 3.0, paths = 300 }
basis = { family = "polynomial", degree = 3 }
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn list_presets_prints_five_rows() {
    let out = bin().arg("list-presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["cubic-monotone", "linear-mu", "gamma-constant-g", "heat", "ou-flow"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.contains("pass")), "{name}\n{text}");
    }
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn check_conditions_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "experiment = \"check-conditions\"\n[coefficients]\npreset = \"cubic-monotone\"\n[conditions]\nsamples = 500\nterminal_paths = 50\n");
    let out = bin().args(["check-conditions", cfg.to_str().unwrap(), "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("o/conditions.txt")).unwrap();
    assert!(report.contains("H.3"));
}

#[test]
fn solve_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SOLVE);
    for o in ["a", "b"] {
        let st = bin().args(["solve-bdsde", cfg.to_str().unwrap(), "--out"]).arg(dir.path().join(o)).status().unwrap();
        assert!(st.success());
    }
    assert_eq!(
        fs::read(dir.path().join("a/solution.csv")).unwrap(),
        fs::read(dir.path().join("b/solution.csv")).unwrap()
    );
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SOLVE);
    let target = dir.path().join("from-env");
    let st = bin().args(["run", cfg.to_str().unwrap()]).env("BDSDE_OUT_DIR", &target).status().unwrap();
    assert!(st.success());
    assert!(target.join("manifest.toml").exists());
}

#[test]
fn exit_codes_partition_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", &(SOLVE.to_string() + "bogus = 3\n"));
    let out = bin().args(["run", bad.to_str().unwrap(), "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["kind"], "config");

    let cfg = write(dir.path(), "c.toml", SOLVE);
    let out = bin().args(["pullback", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let blow = write(
        dir.path(),
        "blow.toml",
        "experiment = \"solve-bdsde\"\n[coefficients]\ninline = { f_poly = [0.0, 0.0, 0.0, 1.0], terminal = { kind = \"constant\", value = 5.0 } }\n[time]\ndt = 0.05\n[solver]\nstarts = { kind = \"point\", x = [0.0], paths = 50 }\nbasis = { family = \"polynomial\", degree = 1 }\n",
    );
    let out = bin().args(["run", blow.to_str().unwrap(), "--out"]).arg(dir.path().join("o2")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("o2/error.json").exists());

    let missing = dir.path().join("nope.toml");
    let out = bin().args(["run", missing.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}
