use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jointct::config::{ExperimentConfig, PRESETS};

const SMALL: &str = r#"
name = "small"
[geometry]
detectors = 24
projections = 20
detector_width = 1.5
domain_side = 1.0
grid_n = 16
span = "half"
[phantom]
kind = "three-squares"
[simulation]
intensities = [1000.0]
flat_samples = 2
seeds = [1, 2]
flatfield = "poisson"
[solver]
iters = 20
record_every = 5
[analysis]
mask_radius = 0.45
[output]
write_pgm = false
[[models]]
kind = "amap"
[[models]]
kind = "jmap"
beta = 1.0
[[models]]
kind = "swls"
beta = 1.0
"#;

fn jointct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointct"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn presets_are_listed_and_printed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jointct(tmp.path(), &["preset"]);
    assert!(o.status.success());
    let listed: Vec<String> = String::from_utf8(o.stdout).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(listed, PRESETS);

    let o = jointct(tmp.path(), &["preset", "table1"]);
    assert!(o.status.success());
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.name, "table1");

    let o = jointct(tmp.path(), &["preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown preset"));
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", &SMALL.replace("detectors = 24", "detectors = 0"));
    let o = jointct(tmp.path(), &["--config", bad.to_str().unwrap(), "all"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let typo = write(tmp.path(), "typo.toml", &SMALL.replace("iters = 20", "iterations = 20"));
    let o = jointct(tmp.path(), &["--config", typo.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = jointct(tmp.path(), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = jointct(tmp.path(), &["--config", "missing.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));

    let good = write(tmp.path(), "good.toml", SMALL);
    let o = jointct(tmp.path(), &["--config", good.to_str().unwrap(), "--jobs", "0", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn degenerate_only_failures_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    // Two photons per flat exposure leave some detectors with an all-zero
    // flat sample, where every plug-in model is undefined.
    let text = SMALL
        .replace("intensities = [1000.0]", "intensities = [2.0]")
        .replace("seeds = [1, 2]", "seeds = [3]")
        .replace("flat_samples = 2", "flat_samples = 1");
    let cfg = write(tmp.path(), "deg.toml", &text);
    let o = jointct(tmp.path(), &["--config", cfg.to_str().unwrap(), "--out", "o", "all"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("degenerate"));
    let failures = fs::read_to_string(tmp.path().join("o/recon/failures.csv")).unwrap();
    assert!(failures.lines().count() >= 2, "{failures}");
    assert!(tmp.path().join("o/analysis/summary.csv").is_file());
}

#[test]
fn stages_run_separately_and_check_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let c = cfg.to_str().unwrap();

    let o = jointct(tmp.path(), &["--config", c, "--out", "s", "reconstruct"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("jointct simulate"), "{}", stderr(&o));

    for stage in ["simulate", "reconstruct", "analyze"] {
        let o = jointct(tmp.path(), &["--config", c, "--out", "s", stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in ["data/manifest.toml", "recon/manifest.toml", "analysis/summary.csv", "analysis/metrics.csv"] {
        assert!(tmp.path().join("s").join(f).is_file(), "{f}");
    }

    let other = write(tmp.path(), "other.toml", &SMALL.replace("iters = 20", "iters = 30"));
    let o = jointct(tmp.path(), &["--config", other.to_str().unwrap(), "--out", "s", "analyze"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mismatched manifests"), "{}", stderr(&o));
}

#[test]
fn seed_override_runs_one_realization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let o = jointct(tmp.path(), &["--config", cfg.to_str().unwrap(), "--seed", "9", "--out", "z", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sets: Vec<String> = fs::read_dir(tmp.path().join("z/data"))
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(sets, ["i1000-s9"]);
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let c = cfg.to_str().unwrap();
    for (jobs, out) in [("1", "a"), ("4", "b")] {
        let o = jointct(tmp.path(), &["--config", c, "--jobs", jobs, "--out", out, "all"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = files_under(&tmp.path().join("a"));
    let b = files_under(&tmp.path().join("b"));
    assert!(a.len() > 10);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs", k.display());
    }
}

#[test]
fn profile_command_accepts_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jointct(tmp.path(), &["--out", "p", "profile", "--t0", "0.3", "--t0", "-0.5", "--epsilon", "0.05"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let extrema = fs::read_to_string(tmp.path().join("p/profile/extrema.csv")).unwrap();
    assert!(extrema.contains("-0.5"), "{extrema}");
    assert!(tmp.path().join("p/profile/envelope.csv").is_file());

    let o = jointct(tmp.path(), &["--out", "p", "profile", "--epsilon", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}
