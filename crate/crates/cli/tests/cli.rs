use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[model]
dropout = 0.1

[model.encoder]
word_dim = 16
speaker_dim = 4
position_dim = 8
predicate_dim = 4
layers = 1
heads = 2
hidden = 24
ffn_hidden = 32
max_positions = 96

[model.inducer]
head_hidden = 16
head_dim = 8

[model.gcn]
hidden = 24

[training]
epochs = 1
batch_size = 4
psp_epochs = 1
"#;

fn polar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polar")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = polar(args);
    assert!(
        out.status.success(),
        "polar {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The single diagnostic line of a failed command.
fn failure(args: &[&str]) -> Value {
    let out = polar(args);
    assert!(!out.status.success(), "polar {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    let last = lines.last().expect("a diagnostic");
    let v: Value = serde_json::from_str(last).expect("diagnostic is JSON");
    assert_eq!(v["status"], "error");
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_records(p: &Path) -> usize {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"dialogue_id\""))
        .count()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("small.toml"), SMALL).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self, name: &str, dialogues: usize, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let n = dialogues.to_string();
        let mut args = vec!["gen-data", "--out", s(&out), "--dialogues", &n, "--seed", "3"];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let cfg = self.path("small.toml");
        let train = data.join("train.jsonl");
        let dev = data.join("dev.jsonl");
        let mut args = vec![
            "train",
            "--config",
            s(&cfg),
            "--train",
            s(&train),
            "--dev",
            s(&dev),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn gen_data_writes_an_eight_one_one_split() {
    let f = Fixture::new();
    let out = f.path("data");
    ok(&["gen-data", "--out", s(&out)]);
    let sizes: Vec<usize> = ["train", "dev", "test"]
        .iter()
        .map(|n| count_records(&out.join(format!("{n}.jsonl"))))
        .collect();
    assert_eq!(sizes, vec![2000, 250, 250]);

    let again = f.path("again");
    ok(&["gen-data", "--out", s(&again)]);
    for n in ["train", "dev", "test"] {
        let file = format!("{n}.jsonl");
        assert_eq!(fs::read(out.join(&file)).unwrap(), fs::read(again.join(&file)).unwrap());
    }
}

#[test]
fn gen_data_rejects_zero_dialogues() {
    let f = Fixture::new();
    let d = failure(&["gen-data", "--out", s(&f.path("x")), "--dialogues", "0"]);
    assert_eq!(d["kind"], "config");
}

#[test]
fn train_smoke_and_determinism() {
    let f = Fixture::new();
    let data = f.data("data", 13, &["--split", "0.77,0.12,0.11"]);
    assert_eq!(count_records(&data.join("train.jsonl")), 10);
    let a = f.train(&data, "a", &[]);
    let b = f.train(&data, "b", &[]);
    assert!(a.join("model.ckpt").exists());
    let log_a = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("metrics.jsonl")).unwrap());
    for kind in ["psp_epoch", "step", "epoch"] {
        assert!(log_a.contains(&format!("\"kind\":\"{kind}\"")), "{kind} missing");
    }
    for line in log_a.lines() {
        let _: Value = serde_json::from_str(line).unwrap();
    }
}

#[test]
fn evaluate_reports_and_roundtrips() {
    let f = Fixture::new();
    let data = f.data("data", 40, &[]);
    let run = f.train(&data, "run", &[]);
    let ckpt = run.join("model.ckpt");
    let dev = data.join("dev.jsonl");

    let gold = f.path("gold.json");
    let out = ok(&["evaluate", "--corpus", s(&dev), "--gold-passthrough", "--report", s(&gold)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("cross") && table.contains("3+"), "{table}");
    let r: Value = serde_json::from_str(&fs::read_to_string(&gold).unwrap()).unwrap();
    for scope in ["all", "cross", "intra"] {
        for key in ["precision", "recall", "f1"] {
            assert_eq!(r[scope][key], 1.0, "{scope}.{key}");
        }
    }
    assert_eq!(r["by_distance"].as_array().unwrap().len(), 3);

    // two loads of the same checkpoint give byte-identical reports
    let (r1, r2) = (f.path("r1.json"), f.path("r2.json"));
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--corpus", s(&dev), "--report", s(&r1)]);
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--corpus", s(&dev), "--report", s(&r2)]);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let rep: Value = serde_json::from_str(&fs::read_to_string(&r1).unwrap()).unwrap();
    for key in ["dialogues", "all", "cross", "intra", "by_distance"] {
        assert!(!rep[key].is_null(), "{key} missing");
    }

    // predictions scored offline agree with the evaluate command
    let pred = f.path("pred.jsonl");
    ok(&["predict", "--checkpoint", s(&ckpt), "--corpus", s(&dev), "--out", s(&pred)]);
    assert_eq!(count_records(&pred), count_records(&dev));
}

#[test]
fn tagset_mismatch_is_an_error() {
    let f = Fixture::new();
    let data = f.data("data", 30, &[]);
    let run = f.train(&data, "run", &[]);
    let other = f.data("other", 10, &["--set", "roles=[\"A0\", \"A2\"]"]);
    let d = failure(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--corpus",
        s(&other.join("dev.jsonl")),
    ]);
    assert_eq!(d["kind"], "tagset_mismatch");
    let d = failure(&["evaluate", "--checkpoint", s(&f.path("missing.ckpt")), "--corpus", s(&other.join("dev.jsonl"))]);
    assert_eq!(d["kind"], "io");
}

fn parse_section(text: &str, name: &str) -> Vec<String> {
    text.split(&format!("[{name}]\n"))
        .nth(1)
        .unwrap()
        .split("\n\n")
        .next()
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn inspect_graph_dumps_both_matrices() {
    let f = Fixture::new();
    let data = f.data("data", 30, &[]);
    let run = f.train(&data, "run", &[]);
    let dump = f.path("graph.txt");
    let dev = data.join("dev.jsonl");
    ok(&["inspect-graph", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&dev), "--out", s(&dump)]);
    let text = fs::read_to_string(&dump).unwrap();
    let k: usize = text.lines().find_map(|l| l.strip_prefix("nodes\t")).unwrap().parse().unwrap();
    for section in ["edges_raw", "edges_pruned"] {
        let lines = parse_section(&text, section);
        assert_eq!(lines.len(), k + 1, "{section}: header plus K rows");
        let header: Vec<&str> = lines[0].split('\t').skip(1).collect();
        assert_eq!(header.len(), k);
        assert_eq!(header.iter().filter(|h| h.ends_with('*')).count(), 1);
        for row in &lines[1..] {
            let vals: Vec<f64> = row.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), k);
            if section == "edges_pruned" {
                // six printed decimals per entry bound the rounding error
                let sum: f64 = vals.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6 + k as f64 * 5e-7, "row sum {sum}");
            }
        }
    }
    assert_eq!(parse_section(&text, "support").len(), k);

    let plain = f.train(&data, "plain", &["--no-prune"]);
    let dump = f.path("plain.txt");
    ok(&["inspect-graph", "--checkpoint", s(&plain.join("model.ckpt")), "--corpus", s(&dev), "--out", s(&dump)]);
    let text = fs::read_to_string(&dump).unwrap();
    assert_eq!(parse_section(&text, "edges_pruned"), vec!["pruning disabled".to_string()]);
}

#[test]
fn psp_checkpoint_seeds_task_training() {
    let f = Fixture::new();
    let data = f.data("data", 30, &[]);
    let pre = f.path("pre");
    let cfg = f.path("small.toml");
    ok(&["psp-pretrain", "--config", s(&cfg), "--train", s(&data.join("train.jsonl")), "--out", s(&pre)]);
    assert!(pre.join("psp.ckpt").exists());
    assert!(fs::read_to_string(pre.join("psp_log.jsonl")).unwrap().contains("psp_epoch"));
    let init = pre.join("psp.ckpt");
    let run = f.train(&data, "run", &["--init", s(&init)]);
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(!log.contains("psp_epoch"), "pretraining must not rerun");
}

#[test]
fn bad_config_keys_fail_cleanly() {
    let f = Fixture::new();
    let data = f.data("data", 10, &[]);
    let train = data.join("train.jsonl");
    let d = failure(&["train", "--train", s(&train), "--out", s(&f.path("o")), "--set", "training.epochz=2"]);
    assert_eq!(d["kind"], "cli");
    let d = failure(&["train", "--train", s(&f.path("nope.jsonl")), "--out", s(&f.path("o"))]);
    assert!(d["message"].as_str().unwrap().contains("does not exist"));
}

#[test]
fn trained_model_scores_train_at_least_as_well_as_dev() {
    let f = Fixture::new();
    // no distractors: every filler phrase is an argument, so a small model
    // converges in a few epochs
    let data = f.data("data", 400, &["--set", "distractor_rate=0.0"]);
    let run = f.train(&data, "run", &["--epochs", "12", "--set", "training.adam.lr=2e-3"]);
    let ckpt = run.join("model.ckpt");
    let score = |corpus: &str| -> f64 {
        let r = f.path(&format!("{corpus}.json"));
        ok(&["evaluate", "--checkpoint", s(&ckpt), "--corpus", s(&data.join(format!("{corpus}.jsonl"))), "--report", s(&r)]);
        let v: Value = serde_json::from_str(&fs::read_to_string(&r).unwrap()).unwrap();
        v["all"]["f1"].as_f64().unwrap()
    };
    let (train, dev) = (score("train"), score("dev"));
    assert!(dev > 0.8, "small model did not converge: dev F1 {dev}");
    assert!(train >= dev, "train {train} < dev {dev}");
}
