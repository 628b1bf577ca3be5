use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn stfuse(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfuse"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn quick<'a>(cmd: &'a str, config: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        cmd,
        "--config",
        config,
        "--set",
        "train.epochs=1",
        "--set",
        "data.target_rate=0.05",
        "--out",
        out,
    ]
}

fn manifest(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

fn manifest_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("manifest lacks {key}"))
        .to_string()
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = stfuse(tmp.path(), &["generate-synthetic", "--set", "seed=3", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(tmp.path().join("a/dataset.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("b/dataset.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("region_id,day_index,"));
    assert_eq!(manifest(&tmp.path().join("a")), manifest(&tmp.path().join("b")));
}

#[test]
fn bad_configuration_fails_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stfuse(
        tmp.path(),
        &["train", "--set", "bogus.key=1", "--set", "model.d_modle=3", "--set", "train.lr=fast", "--out", "x"],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    for key in ["bogus.key", "model.d_modle", "train.lr"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
    assert!(!tmp.path().join("x").exists());

    let o = stfuse(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8(o.stderr).unwrap().trim_end().lines().count(), 1);

    let o = stfuse(tmp.path(), &["evaluate", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stfuse(tmp.path(), &["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["generate-synthetic", "prepare", "render-text", "render-image", "train", "evaluate", "sensors-out", "ood", "ablate-all"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn render_commands_write_inside_out() {
    let tmp = tempfile::tempdir().unwrap();
    let config = desk();
    let config = config.to_str().unwrap();
    let o = stfuse(tmp.path(), &["render-image", "--config", config, "--region", "r01", "--day", "500", "--out", "img"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = std::fs::read(tmp.path().join("img/image_r01_500.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let o = stfuse(tmp.path(), &["render-text", "--config", config, "--region", "r00", "--day", "420", "--out", "txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(tmp.path().join("txt/text_r00_420.txt")).unwrap();
    assert!(text.contains("r00"));
    let vocab = std::fs::read_to_string(tmp.path().join("txt/vocab.txt")).unwrap();
    assert!(vocab.lines().all(|l| l.split('\t').count() == 2));

    let mut entries: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    entries.sort();
    assert_eq!(entries, vec!["img", "txt"]);

    let o = stfuse(tmp.path(), &["render-image", "--config", config, "--region", "r09", "--day", "500", "--out", "bad"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_evaluate_and_sensors_out() {
    let tmp = tempfile::tempdir().unwrap();
    let config = desk();
    let config = config.to_str().unwrap();
    let o = stfuse(tmp.path(), &quick("train", config, "run"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = tmp.path().join("run/checkpoint");
    assert!(ck.join("manifest.txt").exists());
    let log = std::fs::read_to_string(tmp.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let ck_set = format!("checkpoint={}", ck.display());
    let mut args = quick("evaluate", config, "eval");
    args.extend(["--set", &ck_set]);
    let o = stfuse(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(tmp.path().join("eval/metrics.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(row["protocol"], "standard");
    assert_eq!(row["variant"], "full");
    assert!(row["rmse"].as_f64().unwrap() > 0.0);

    let mut args = quick("sensors-out", config, "so");
    args.extend(["--set", &ck_set, "--set", "mask.mode=fixed"]);
    let o = stfuse(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(tmp.path().join("so/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let counts: Vec<u64> = rows.iter().map(|r| r["missing_count"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![1, 2, 3, 4]);
    assert!(rows.iter().all(|r| r["protocol"] == "sensors-out"));
    let m = manifest(&tmp.path().join("so"));
    assert!(manifest_value(&m, "result.rmse_increase_ratio").parse::<f64>().is_ok());

    let mut entries: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    entries.sort();
    assert_eq!(entries, vec!["eval", "run", "so"]);
}

#[test]
fn ood_regions_are_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = desk();
    let o = stfuse(tmp.path(), &quick("ood", config.to_str().unwrap(), "ood"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&tmp.path().join("ood"));
    let train = manifest_value(&m, "split.train_regions");
    let test = manifest_value(&m, "split.test_regions");
    let train: Vec<&str> = train.split(',').collect();
    let test: Vec<&str> = test.split(',').collect();
    assert_eq!(train.len(), 3);
    assert_eq!(test.len(), 1);
    assert!(test.iter().all(|r| !train.contains(r)));
    let metrics = std::fs::read_to_string(tmp.path().join("ood/metrics.jsonl")).unwrap();
    assert!(metrics.contains("\"protocol\":\"ood\""));
}
