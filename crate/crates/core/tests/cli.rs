use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

fn ehrstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehrstream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let out = ehrstream(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ehrstream(&["pretrain", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("--events"), "{}", text(&out.stderr));
    let out = ehrstream(&["synth", "--out", "x", "--patients", "many"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = ehrstream(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("inspect-cache"));
}

#[test]
fn gradcheck_reports() {
    let out = ehrstream(&["gradcheck", "--hidden", "8", "--layers", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("status: pass"), "{stdout}");
    // the resolved configuration is echoed with defaults expanded
    let stderr = text(&out.stderr);
    assert!(stderr.contains("config alpha=3"), "{stderr}");
    assert!(stderr.contains("config tolerance=0.0001"), "{stderr}");
}

#[test]
fn domain_errors_exit_1_with_name() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = ehrstream(&["ingest", "--events", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("error: IoError:"), "{}", text(&out.stderr));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let out = ehrstream(&["ingest", "--events", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("error: ParseError:"), "{}", text(&out.stderr));

    let out = ehrstream(&["synth", "--patients", "0", "--out", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("error: InvalidSpec:"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# gradient check settings\nhidden = 4\nlayers=1\nheads=2\nseed=3\n").unwrap();
    let out = ehrstream(&["--config", p(&conf), "gradcheck", "--hidden", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stderr = text(&out.stderr);
    assert!(stderr.contains("config hidden=8"), "{stderr}");
    assert!(stderr.contains("config seed=3"), "{stderr}");
    assert!(stderr.contains("config eps=0.00001"), "{stderr}");

    std::fs::write(&conf, "no equals sign\n").unwrap();
    let out = ehrstream(&["--config", p(&conf), "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_to_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.jsonl");
    let out = ehrstream(&[
        "synth", "--patients", "60", "--features", "9", "--rate", "0.003", "--signal-incidence", "0.3", "--seed", "4",
        "--out", p(&events),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let labels = dir.path().join("events.jsonl.labels.csv");
    assert!(labels.exists());
    assert!(text(&out.stdout).contains("stays: 60"));

    let vocab = dir.path().join("vocab.json");
    let windows = dir.path().join("windows.jsonl");
    let out = ehrstream(&[
        "ingest", "--events", p(&events), "--vocab-out", p(&vocab), "--windows-out", p(&windows),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let n_windows = std::fs::read_to_string(&windows).unwrap().lines().count();
    assert!(text(&out.stdout).contains(&format!("windows: {n_windows}")));
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&windows).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["tokens"][0]["feature"], "[CLS]");

    let ckpt = dir.path().join("pre.ckpt");
    let common = ["--events", p(&events), "--ratios", "0.6,0.2,0.2"];
    let mut args = vec!["pretrain"];
    args.extend(common);
    args.extend([
        "--hidden", "16", "--layers", "1", "--heads", "2", "--ffn-dim", "32", "--pre-dim", "8", "--epochs", "2",
        "--lr", "1e-3", "--out", p(&ckpt),
    ]);
    let out = ehrstream(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("pre.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5, "{log}");
    assert!(dir.path().join("pre.ckpt.meta.json").exists());

    let vectors = dir.path().join("none.ehrv");
    let out = ehrstream(&["inspect-cache", "--cache", p(&vectors)]);
    assert_eq!(out.status.code(), Some(1));

    let task = dir.path().join("task.ckpt");
    let out = ehrstream(&[
        "finetune", "--events", p(&events), "--labels", p(&labels), "--checkpoint", p(&ckpt), "--task", "binary",
        "--epochs", "2", "--folds", "2", "--out", p(&task),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = text(&out.stdout);
    assert!(report.contains("folds: 2") && report.contains("auroc: "), "{report}");
    assert_eq!(std::fs::read_to_string(dir.path().join("task.ckpt.results.txt")).unwrap(), report);

    let results = dir.path().join("eval.txt");
    let out = ehrstream(&[
        "evaluate", "--events", p(&events), "--labels", p(&labels), "--checkpoint", p(&task), "--split", "all",
        "--results", p(&results),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("samples: 60"));
    assert!(results.exists());

    // fine-tuning needs a pretraining checkpoint
    let out = ehrstream(&[
        "finetune", "--events", p(&events), "--labels", p(&labels), "--checkpoint", p(&task), "--out",
        p(&dir.path().join("again.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("ConfigMismatch"));
}

#[test]
fn inspect_cache_lists_entries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ehrv");
    let table: HashMap<String, Vec<f32>> =
        [("b".to_string(), vec![3.0, 4.0]), ("a".to_string(), vec![0.0, 1.0])].into();
    ehrstream::text_embed::write_cache(&path, 2, &table).unwrap();
    let out = ehrstream(&["inspect-cache", "--cache", p(&path), "--key", "b"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("entries: 2") && s.contains("dim: 2"), "{s}");
    assert!(s.contains("norm_max: 5.000000"), "{s}");
    assert!(s.contains("key: a\nkey: b"), "{s}");
    assert!(s.contains("vector[b]: 3.000000 4.000000"), "{s}");
    let out = ehrstream(&["inspect-cache", "--cache", p(&path), "--key", "zz"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("CacheMiss"));
}
