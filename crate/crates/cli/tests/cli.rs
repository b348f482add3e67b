use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic/run.toml")
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reasonrec"))
        .arg("--config")
        .arg(fixture_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn eval_before_training_is_a_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(3));
    ok(dir.path(), &["prepare"]);
    let o = run(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--threads", "0", "prepare"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\ndim = 6\nheads = 4\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_reasonrec")).arg("--config").arg(&bad).arg("prepare").output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fixture_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let start = Instant::now();
    ok(out, &["prepare"]);
    ok(out, &["pretrain"]);
    let prompts = ok(out, &["bootstrap", "--dry-run", "--limit", "2"]);
    // A pattern prompt and a reason prompt per user.
    assert_eq!(prompts.matches("\n---\n").count(), 4);
    ok(out, &["bootstrap"]);
    ok(out, &["train-rm"]);
    ok(out, &["train-rm", "--sequence-only"]);
    ok(out, &["correct"]);
    for args in [&["eval"][..], &["eval", "--stores", "bootstrap"], &["eval", "--sequence-only"]] {
        let tsv = ok(out, args);
        let mut lines = tsv.lines();
        assert_eq!(lines.next(), Some("k\trecall\tndcg\tusers"));
        for line in lines {
            let f: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap()).collect();
            assert!((0.0..=1.0).contains(&f[1]) && (0.0..=1.0).contains(&f[2]) && f[2] <= f[1]);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "pipeline took {elapsed:?}");

    let bench: serde_json::Value = serde_json::from_str(&ok(out, &["bench"])).unwrap();
    assert!(bench["mean_seconds_per_sample"].as_f64().unwrap() > 0.0);

    let case = PathBuf::from(ok(out, &["export-case", "--user", "1", "--item", "5"]).trim());
    let tsv = std::fs::read_to_string(case.join("attention.tsv")).unwrap();
    let case_json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(case.join("case.json")).unwrap()).unwrap();
    let n_reasons = case_json["reasons"].as_array().unwrap().len();
    let mut per_head: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for line in tsv.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let e = per_head.entry(f[3].parse().unwrap()).or_default();
        e.0 += f[4].parse::<f64>().unwrap();
        e.1 += 1;
    }
    assert!(!per_head.is_empty());
    for (h, (sum, rows)) in per_head {
        assert_eq!(rows, n_reasons, "head {h}");
        assert!((sum - 1.0).abs() < 1e-9, "head {h} sums to {sum}");
    }

    let o = run(out, &["export-case", "--user", "no-such-user", "--item", "5"]);
    assert_eq!(o.status.code(), Some(2));
}
