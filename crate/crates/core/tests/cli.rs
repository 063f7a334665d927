use std::path::Path;
use std::process::Command;

fn cli(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hybrid-l96"))
        .args(args)
        .arg("--output")
        .arg(dir)
        .env("RUST_LOG", "error")
        .env("HYBRID_L96_WORKERS", "1")
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "[model]\nsteps = 300\n\n[observations]\ncount = 20\nsigma_obs = 1.0\n\n[hybrid]\ncycles = 0\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for stage in ["generate-truth", "observe", "interp"] {
        let (code, out) = cli(dir.path(), &["--profile", "ci", "--config", &cfg, stage]);
        assert_eq!(code, 0, "{stage}: {out}");
    }
    for f in ["config.toml", "truth.bin", "observations.bin", "interpolated.bin", "interpolated_mask.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn unknown_keys_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[filter]\nn_member = 30\n").unwrap();
    let (code, out) = cli(dir.path(), &["--config", path.to_str().unwrap(), "generate-truth"]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("n_member"));
}

#[test]
fn bad_arguments_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["--profile", "huge", "run"]).0, 1);
    assert_eq!(cli(dir.path(), &["sweep", "--axis", "forcing", "--values", "1"]).0, 1);
}

#[test]
fn missing_inputs_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = cli(dir.path(), &["--profile", "ci", "observe"]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("truth.bin"));
}

#[test]
fn seed_flag_changes_observations_only_through_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |seed: &str, sub: &str| {
        let d = dir.path().join(sub);
        for stage in ["generate-truth", "observe"] {
            assert_eq!(cli(&d, &["--profile", "ci", "--config", &cfg, "--seed", seed, stage]).0, 0);
        }
        (std::fs::read(d.join("truth.bin")).unwrap(), std::fs::read(d.join("observations.bin")).unwrap())
    };
    let (a, b, c) = (run("5", "a"), run("5", "b"), run("6", "c"));
    assert_eq!(a, b);
    assert_eq!(a.0, c.0);
    assert_ne!(a.1, c.1);
}
