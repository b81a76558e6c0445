use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "template_points = 64
search_points = 128
neighbors = [8, 8, 8]
channels = [16, 16, 32]
feature_dim = 16
ego_k = 16
head_width = 16
batch_size = 2
steps = 10
";

fn siamtrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamtrack"))
        .current_dir(dir)
        .env_remove("SIAMTRACK_DATA_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = siamtrack(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.toml"), TOY).unwrap();
    ok(dir.path(), &["synth", "--out", "data", "--tracklets", "3", "--frames", "5"]);
    dir
}

#[test]
fn train_track_eval_round_trip() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["--config", "toy.toml", "train", "--data", "data", "--split", "all", "--out", "run"]);
    let curve = fs::read_to_string(d.join("run/loss.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 10);
    let track = ["track", "--data", "data", "--split", "all", "--checkpoint", "run/model.skpt"];
    let a = ok(d, &[&track[..], &["--out", "a.jsonl"]].concat());
    ok(d, &[&track[..], &["--out", "b.jsonl"]].concat());
    assert_eq!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(fs::read_to_string(d.join("a.jsonl")).unwrap().lines().count(), 15);
    let e = ok(d, &["eval", "--results", "a.jsonl"]);
    assert_eq!(a, e);
}

#[test]
fn oracle_eval_is_perfect() {
    let dir = prepared();
    let out = ok(dir.path(), &["eval", "--data", "data", "--split", "all", "--predictor", "oracle"]);
    assert!(out.contains("Success 100.0\tPrecision 100.0"), "{out}");
}

#[test]
fn dataset_root_comes_from_the_environment() {
    let dir = prepared();
    let out = Command::new(env!("CARGO_BIN_EXE_siamtrack"))
        .env("SIAMTRACK_DATA_ROOT", dir.path().join("data"))
        .args(["eval", "--split", "all", "--predictor", "constant"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("frames 15"));
}

#[test]
fn exit_codes() {
    let dir = prepared();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "heads = 2\nfoo = 1\n").unwrap();
    let bad = siamtrack(d, &["--config", "bad.toml", "bench"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("foo"));

    assert_eq!(siamtrack(d, &["nonsense"]).status.code(), Some(1));
    assert_eq!(siamtrack(d, &["eval", "--split", "all"]).status.code(), Some(1));

    let missing = siamtrack(d, &["eval", "--data", "nowhere", "--predictor", "oracle"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));

    fs::write(d.join("broken.jsonl"), "{\"tracklet\": 1}\n").unwrap();
    let broken = siamtrack(d, &["eval", "--results", "broken.jsonl"]);
    assert_eq!(broken.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("line 1"));
}

#[test]
fn bench_reports_stages() {
    let dir = prepared();
    let out = ok(dir.path(), &["--config", "toy.toml", "bench", "--repeats", "2", "--out", "t.json"]);
    assert!(out.starts_with("run\tbackbone_ms\tcorrelation_ms\thead_ms"));
    assert!(out.contains("\nmean\t"));
    let json = fs::read_to_string(dir.path().join("t.json")).unwrap();
    assert!(json.contains("correlation_ms"));
}

#[test]
fn shipped_configs_match_presets() {
    use siamtrack::config::Config;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(Config::load(&dir.join("published.toml")).unwrap(), Config::published());
    assert_eq!(Config::load(&dir.join("toy.toml")).unwrap(), Config::toy());
}
