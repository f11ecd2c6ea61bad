use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lhs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lhs"))
        .current_dir(dir)
        .env("LHS_THREADS", "2")
        .env_remove("LHS_SEED")
        .arg("-q")
        .args(args)
        .output()
        .expect("spawning lhs")
}

fn ok(dir: &Path, args: &[&str]) -> HashMap<String, String> {
    let out = lhs(dir, args);
    assert!(
        out.status.success(),
        "lhs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn num(records: &HashMap<String, String>, key: &str) -> f64 {
    records.get(key).unwrap_or_else(|| panic!("missing {key} in {records:?}")).parse().unwrap()
}

fn synth(dir: &Path, count: &str) {
    ok(dir, &["synth", "--out", "data", "--classes", "3", "--count", count, "--size", "48"]);
}

/// Splits the synthetic manifest into even and odd entries.
fn split_manifest(dir: &Path) {
    let text = fs::read_to_string(dir.join("data/manifest.tsv")).unwrap();
    let (mut train, mut test) = (String::new(), String::new());
    for (i, line) in text.lines().enumerate() {
        let target = if i % 2 == 0 { &mut train } else { &mut test };
        target.push_str(line);
        target.push('\n');
    }
    fs::write(dir.join("data/train.tsv"), train).unwrap();
    fs::write(dir.join("data/test.tsv"), test).unwrap();
}

/// All same pairs within each class and an equal number of cross-class pairs,
/// alternating between two folds.
fn write_pairs(dir: &Path) {
    let text = fs::read_to_string(dir.join("data/manifest.tsv")).unwrap();
    let rows: Vec<(String, String)> = text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (format!("data/{}", f[0]), f[1].to_string())
        })
        .collect();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].1 == rows[j].1 {
                same.push((i, j));
            } else if (i + j) % 5 == 0 {
                diff.push((i, j));
            }
        }
    }
    diff.truncate(same.len());
    let mut out = String::new();
    for (k, (i, j)) in same.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t1\t{}\n", rows[*i].0, rows[*j].0, k % 2));
    }
    for (k, (i, j)) in diff.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t-1\t{}\n", rows[*i].0, rows[*j].0, k % 2));
    }
    fs::write(dir.join("pairs.tsv"), out).unwrap();
}

#[test]
fn train_encode_and_classify() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "8");
    split_manifest(dir);

    let gmm = ok(
        dir,
        &[
            "train-gmm", "--manifest", "data/train.tsv", "-k", "4", "--grid", "2x2", "--sampling", "circular",
            "--max-samples", "20000", "--out", "m.gmm",
        ],
    );
    assert_eq!(gmm["components"], "4");
    assert_eq!(gmm["sampling"], "circular");
    assert!(dir.join("m.stats").exists());

    let enc = ok(
        dir,
        &["encode", "--manifest", "data/train.tsv", "--model", "m.gmm", "--grid", "2x2", "--out", "desc"],
    );
    assert_eq!(enc["images"], "12");
    assert_eq!(fs::read_to_string(dir.join("desc/index.tsv")).unwrap().lines().count(), 12);

    let svm = ok(dir, &["train-svm", "--desc", "desc", "--folds", "2", "--out", "s.svm"]);
    assert_eq!(svm["classes"], "3");
    assert!(dir.join("s.svm").exists());

    let report = ok(
        dir,
        &[
            "classify", "--train", "data/train.tsv", "--test", "data/test.tsv", "-k", "4", "--grid", "2x2",
            "--c-grid", "1",
        ],
    );
    assert!(num(&report, "accuracy") >= 0.9, "{report:?}");
    assert_eq!(report["c"], "1");
}

#[test]
fn baseline_descriptors_need_no_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "4");
    for kind in ["lbp", "ltp"] {
        let out = format!("desc-{kind}");
        let enc = ok(dir, &["encode", "--manifest", "data/manifest.tsv", "--kind", kind, "--grid", "2x2", "--out", &out]);
        assert_eq!(enc["kind"].split(':').next(), Some(kind));
        assert_eq!(enc["images"], "12");
    }
    let missing = lhs(dir, &["encode", "--manifest", "data/manifest.tsv", "--out", "x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--model"));
}

#[test]
fn verification_with_and_without_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "6");
    write_pairs(dir);
    ok(dir, &["train-gmm", "--manifest", "data/manifest.tsv", "-k", "4", "--max-samples", "20000", "--out", "m.gmm"]);
    ok(
        dir,
        &["encode", "--manifest", "data/manifest.tsv", "--model", "m.gmm", "--with-flips", "--out", "desc"],
    );

    let plain = ok(
        dir,
        &["verify", "--pairs", "pairs.tsv", "--test-pairs", "pairs.tsv", "--desc", "desc", "--unsupervised", "--flips"],
    );
    assert!(num(&plain, "accuracy") >= 0.8, "{plain:?}");
    assert!(plain.contains_key("threshold"));

    let metric = ok(
        dir,
        &[
            "train-metric", "--pairs", "pairs.tsv", "--desc", "desc", "--dim", "8", "--iters", "3000", "--log-every",
            "1000", "--out", "m.met",
        ],
    );
    assert_eq!(metric["dim"], "8");
    assert!(metric.contains_key("loss.1000"));
    let learned = ok(dir, &["verify", "--pairs", "pairs.tsv", "--test-pairs", "pairs.tsv", "--desc", "desc", "--metric", "m.met"]);
    assert!(num(&learned, "eer") <= 0.5, "{learned:?}");
}

#[test]
fn bench_protocols() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "6");
    write_pairs(dir);
    let split = ok(
        dir,
        &["bench", "--manifest", "data/manifest.tsv", "--protocol", "split:0.5:2", "-k", "4", "--c-grid", "1"],
    );
    assert_eq!(num(&split, "runs"), 2.0);
    assert!(num(&split, "mean_accuracy") >= 0.9, "{split:?}");

    let pairs = ok(dir, &["bench", "--pairs", "pairs.tsv", "--protocol", "pairs", "-k", "4"]);
    assert_eq!(num(&pairs, "runs"), 2.0);
    assert!(pairs.contains_key("mean_eer"));

    let lbp = ok(
        dir,
        &["bench", "--manifest", "data/manifest.tsv", "--protocol", "split:0.5:1", "--kind", "lbp", "--c-grid", "1"],
    );
    assert!(num(&lbp, "mean_accuracy") > 0.5);
}

#[test]
fn runs_are_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "4");
    let args = ["--seed", "9", "train-gmm", "--manifest", "data/manifest.tsv", "-k", "3", "--max-samples", "5000"];
    let a = ok(dir, &[&args[..], &["--out", "a.gmm"]].concat());
    let b = ok(dir, &[&args[..], &["--out", "b.gmm"]].concat());
    assert_eq!(a["mean_log_likelihood"], b["mean_log_likelihood"]);
    assert_eq!(fs::read(dir.join("a.gmm")).unwrap(), fs::read(dir.join("b.gmm")).unwrap());
    assert_eq!(fs::read(dir.join("a.stats")).unwrap(), fs::read(dir.join("b.stats")).unwrap());
}

#[test]
fn config_file_supplies_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "4");
    fs::write(dir.join("lhs.toml"), "seed = 3\n[pipeline]\ncomponents = 2\nsampling = \"circular\"\nmax_samples = 4000\n").unwrap();
    let out = ok(dir, &["--config", "lhs.toml", "train-gmm", "--manifest", "data/manifest.tsv", "--out", "m.gmm"]);
    assert_eq!(out["components"], "2");
    assert_eq!(out["sampling"], "circular");
    assert_eq!(out["samples"], "4000");

    fs::write(dir.join("bad.toml"), "[pipeline]\ncomponentz = 2\n").unwrap();
    let bad = lhs(dir, &["--config", "bad.toml", "train-gmm", "--manifest", "data/manifest.tsv", "--out", "m.gmm"]);
    assert!(!bad.status.success());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = lhs(dir, &["bench", "--manifest", "nope.tsv"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let protocol = lhs(dir, &["bench", "--manifest", "nope.tsv", "--protocol", "split:2:1"]);
    assert!(!protocol.status.success());

    let class = lhs(dir, &["synth", "--out", "d", "--class", "noequals"]);
    assert!(!class.status.success());

    let usage = lhs(dir, &["verify", "--pairs", "a", "--test-pairs", "b", "--desc", "c"]);
    assert!(!usage.status.success());
}

#[test]
fn synth_accepts_explicit_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = ok(
        dir,
        &[
            "synth", "--out", "d", "--count", "2", "--size", "32", "--class", "flat=constant:value=90", "--class",
            "wave=sinusoid:angle=45,period=6,amp=30,noise=4",
        ],
    );
    assert_eq!(out["images"], "4");
    assert_eq!(out["class.flat"], "constant:value=90");
    let manifest = fs::read_to_string(dir.join("d/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\tflat")).count(), 2);
}
