use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn atrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = atrc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walk(dir) {
        if e.file_name().unwrap() != "manifest.json" {
            out.push((e.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&e).unwrap()));
        }
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn gen_data_writes_one_directory_per_sample_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = smoke_config();
    for dir in [&a, &b] {
        ok(&["gen-data", "--config", p(&cfg), "--out", p(dir), "--count", "1", "--seed", "7"]);
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 7, "{:?}", fa.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert!(fa.iter().all(|(name, _)| name.starts_with("train_00000")));
    assert_eq!(fa, files(&b));
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
    assert!(manifest["finished_unix"].is_u64());
}

#[test]
fn a_missing_config_fails_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = atrc(&["gen-data", "--config", "/no/such/config.json", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.json"));
}

#[test]
fn retrain_requires_an_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let out = atrc(&["retrain", "--config", p(&smoke_config()), "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--arch"));
}

#[test]
fn gradcheck_passes_on_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gradcheck", "--out", p(tmp.path()), "--runs", "1", "--seed", "4"]);
    let csv = std::fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.lines().any(|l| l.starts_with("network,4,")));
}

#[test]
fn search_retrain_eval_importance_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name);
    let cfg = smoke_config();
    let cfg = p(&cfg);

    ok(&["search", "--config", cfg, "--out", p(&dir("one")), "--runs", "1", "--seed", "3"]);
    let search = json(&dir("one/search.json"));
    let voted = json(&dir("one/voted_arch.json"));
    assert_eq!(search["runs"][0]["selection"], voted["arch"]);
    assert_eq!(voted["arch"].as_array().unwrap().len(), 16);
    let table = std::fs::read_to_string(dir("one/selections.txt")).unwrap();
    assert!(table.contains("voted") && table.contains("boundary"));
    assert!(!dir("one/agreement.json").exists());

    ok(&["search", "--config", cfg, "--out", p(&dir("search"))]);
    let selections = std::fs::read_to_string(dir("search/selections.csv")).unwrap();
    assert_eq!(selections.lines().count(), 1 + 2 * 16);
    let agreement = json(&dir("search/agreement.json"));
    assert_eq!(agreement["pairs"].as_array().unwrap().len(), 1);

    let arch = dir("search/voted_arch.json");
    ok(&["retrain", "--config", cfg, "--out", p(&dir("retrain")), "--arch", p(&arch)]);
    let ck = dir("retrain/checkpoint.atrc");
    let metrics = dir("retrain/metrics.json");
    let csv = std::fs::read_to_string(dir("retrain/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("run,task,metric,value"));
    assert_eq!(csv.lines().count(), 5);

    // Evaluating against its own metrics gives a zero measure.
    ok(&["eval", "--config", cfg, "--out", p(&dir("eval")), "--checkpoint", p(&ck), "--baseline", p(&metrics)]);
    assert_eq!(json(&dir("eval/summary.json"))["delta_m"].as_f64(), Some(0.0));
    assert_eq!(
        std::fs::read_to_string(dir("eval/metrics.csv")).unwrap().lines().skip(1).map(|l| l.split_once(',').unwrap().1.to_string()).collect::<Vec<_>>(),
        csv.lines().skip(1).map(|l| l.split_once(',').unwrap().1.to_string()).collect::<Vec<_>>()
    );

    ok(&["importance", "--config", cfg, "--out", p(&dir("imp")), "--checkpoint", p(&ck)]);
    let imp = std::fs::read_to_string(dir("imp/importance.csv")).unwrap();
    assert_eq!(imp.lines().count(), 17);
    assert!(dir("imp/importance.pgm").exists());

    ok(&[
        "agreement",
        "--config",
        cfg,
        "--out",
        p(&dir("agree")),
        "--search",
        p(&dir("search/search.json")),
        "--importance",
        p(&dir("imp/importance.json")),
    ]);
    let r = json(&dir("agree/correlation.json"))["pearson"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&r));

    // One heatmap per query, and only for blocks that attend.
    let retrained = json(&arch);
    let a = retrained["arch"].as_array().unwrap();
    let tasks = ["semseg", "depth", "normals", "boundary"];
    let queries: Vec<String> = (0..16)
        .filter(|&j| a[j] != "none")
        .take(2)
        .map(|j| format!("{}:{}:5", tasks[j / 4], j % 4))
        .collect();
    let mut args = vec!["export-attn", "--config", cfg, "--checkpoint", p(&ck)];
    let out = dir("attn");
    args.extend(["--out", p(&out)]);
    for q in &queries {
        args.extend(["--query", q.as_str()]);
    }
    ok(&args);
    let pgms = walk(&out).into_iter().filter(|f| f.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!(pgms, queries.len());
    if let Some(j) = (0..16).find(|&j| a[j] == "none") {
        let q = format!("{}:{}:0", j / 4, j % 4);
        let fail = atrc(&["export-attn", "--config", cfg, "--out", p(&dir("attn2")), "--checkpoint", p(&ck), "--query", &q]);
        assert!(!fail.status.success());
    }
}

#[test]
fn all_none_architecture_retrains_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let arch = tmp.path().join("none.json");
    let tasks = ["semseg", "depth", "normals", "boundary"];
    std::fs::write(&arch, serde_json::json!({"tasks": tasks, "arch": vec!["none"; 16]}).to_string()).unwrap();
    let cfg = smoke_config();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["retrain", "--config", p(&cfg), "--out", p(&out), "--arch", p(&arch)]);
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    let out = atrc(&[
        "export-attn",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("attn")),
        "--checkpoint",
        p(&tmp.path().join("a/checkpoint.atrc")),
        "--query",
        "0:1:0",
    ]);
    assert!(!out.status.success());
}

#[test]
fn mismatched_architecture_tasks_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let arch = tmp.path().join("bad.json");
    std::fs::write(&arch, serde_json::json!({"tasks": ["a", "b"], "arch": vec!["none"; 4]}).to_string()).unwrap();
    let out = atrc(&["retrain", "--config", p(&smoke_config()), "--out", p(tmp.path()), "--arch", p(&arch)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
}
