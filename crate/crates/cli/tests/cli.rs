use std::path::Path;
use std::process::{Command, Output};

fn fishnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fishnet")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    fishnet(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["gradcheck", "--no-such-flag"]), 1);
    assert_eq!(code(&["pretrain"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&["--out-dir", s(&out), "pretrain", "--data", s(&dir.path().join("absent"))]), 2);
}

#[test]
fn bad_config_value_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "cases = many\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "--out-dir", s(&dir.path().join("o")), "gradcheck"]), 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\ncases = 1\nseed = 4\n").unwrap();
    let out = dir.path().join("o");
    let r = fishnet(&["--config", s(&cfg), "--out-dir", s(&out), "gradcheck", "--cases", "2"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["cases"], "2");
    assert_eq!(manifest["seed"], 4);
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));
}

#[test]
fn replay_reproduces_and_catches_changes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("gen");
    assert_eq!(code(&["--seed", "2", "--out-dir", s(&data), "gen-synthetic", "--kind", "classification", "--classes", "2", "--per-class", "6", "--image-size", "16"]), 0);
    let aug = dir.path().join("aug");
    assert_eq!(code(&["--seed", "3", "--out-dir", s(&aug), "augment", "--data", s(&data.join("dataset"))]), 0);
    let manifest = aug.join("manifest.json");
    assert_eq!(code(&["replay", "--manifest", s(&manifest), "--out-dir", s(&dir.path().join("again"))]), 0);

    // A recorded checksum that the rerun cannot reproduce fails the replay.
    let mut recorded: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    recorded["outputs"]["split.csv"] = serde_json::json!("0".repeat(64));
    let edited = dir.path().join("edited.json");
    std::fs::write(&edited, serde_json::to_vec(&recorded).unwrap()).unwrap();
    assert_eq!(code(&["replay", "--manifest", s(&edited), "--out-dir", s(&dir.path().join("second"))]), 2);

    // A changed input stops the replay before anything runs.
    let first = std::fs::read_dir(data.join("dataset/species_00"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::write(&first, b"not an image").unwrap();
    assert_eq!(code(&["replay", "--manifest", s(&manifest), "--out-dir", s(&dir.path().join("third"))]), 2);
}
