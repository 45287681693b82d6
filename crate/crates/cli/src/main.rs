mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use polar_core::checkpoint;
use polar_core::corpus::Corpus;
use polar_core::dialogue::{Dialogue, Vocab};
use polar_core::eval::evaluate;
use polar_core::model::{GraphDump, PolarModel};
use polar_core::synth::{gen_synthetic, split, SynthConfig};
use polar_core::train::{self, LogRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "polar", version, about = "Conversational semantic role labeling over a predicate-oriented latent graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus split into train/dev/test files.
    GenData(GenDataArgs),
    /// Pretrain the encoder on pronoun speaker prediction only.
    PspPretrain(RunArgs),
    /// Speaker pretraining (unless disabled) followed by task training.
    Train(RunArgs),
    /// Score a checkpoint (or the gold labels themselves) on a corpus.
    Evaluate(EvaluateArgs),
    /// Write a corpus whose roles are the model's predicted spans.
    Predict(PredictArgs),
    /// Dump the latent graph built for one dialogue.
    InspectGraph(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Generator settings file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dialogues: Option<usize>,
    /// Split fractions for train, dev and test.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    split: Vec<f64>,
    /// Override a generator key, e.g. `--set distractor_rate=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file (TOML key-value pairs).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set training.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_pgi: bool,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    no_gate: bool,
    #[arg(long)]
    no_psp: bool,
    #[arg(long)]
    bert_style_pairing: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "gold_passthrough")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Score the gold labels against themselves.
    #[arg(long)]
    gold_passthrough: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Dialogue to inspect; defaults to the first record.
    #[arg(long)]
    dialogue_id: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn note(value: serde_json::Value) {
    eprintln!("{value}");
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let loaded = Corpus::load(path).with_context(|| format!("loading {}", path.display()))?;
    for w in &loaded.warnings {
        note(json!({"status": "warning", "file": path.display().to_string(), "message": w}));
    }
    Ok(loaded.corpus)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut table = config::read_table(args.config.as_deref())?;
    config::apply_overrides(&mut table, &args.sets)?;
    if let Some(n) = args.dialogues {
        config::set_path(&mut table, "dialogues", toml::Value::Integer(n as i64))?;
    }
    let cfg: SynthConfig = config::finish(table)?;
    if args.split.len() != 3 {
        bail!("--split needs three fractions, got {}", args.split.len());
    }
    let corpus = gen_synthetic(&cfg, args.seed)?;
    let parts = split(&corpus, &args.split)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut sizes = Vec::new();
    for (name, part) in ["train", "dev", "test"].iter().zip(&parts) {
        let path = args.out.join(format!("{name}.jsonl"));
        part.save(&path).with_context(|| format!("writing {}", path.display()))?;
        sizes.push(part.len());
    }
    note(json!({"status": "ok", "command": "gen-data", "train": sizes[0], "dev": sizes[1], "test": sizes[2]}));
    Ok(())
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut table = config::read_table(args.config.as_deref())?;
    config::apply_overrides(&mut table, &args.sets)?;
    let path = |p: &Path| toml::Value::String(p.display().to_string());
    let mut set = |k: &str, v: toml::Value| config::set_path(&mut table, k, v);
    if let Some(p) = &args.train {
        set("train", path(p))?;
    }
    if let Some(p) = &args.dev {
        set("dev", path(p))?;
    }
    if let Some(p) = &args.out {
        set("out_dir", path(p))?;
    }
    if let Some(p) = &args.init {
        set("init", path(p))?;
    }
    if let Some(e) = args.epochs {
        set("training.epochs", toml::Value::Integer(e as i64))?;
    }
    if let Some(s) = args.seed {
        set("training.seed", toml::Value::Integer(s as i64))?;
    }
    for (flag, key) in [
        (args.no_pgi, "no_pgi"),
        (args.no_prune, "no_prune"),
        (args.no_gate, "no_gate"),
        (args.no_psp, "no_psp"),
        (args.bert_style_pairing, "bert_style_pairing"),
    ] {
        if flag {
            set(&format!("model.ablations.{key}"), toml::Value::Boolean(true))?;
        }
    }
    let cfg: RunConfig = config::finish(table)?;
    cfg.check_paths()?;
    cfg.training.validate()?;
    Ok(cfg)
}

/// Copies every parameter of `from` that `to` also has. Shapes must agree.
fn transfer(from: &PolarModel, to: &mut PolarModel) -> Result<usize> {
    let mut copied = 0;
    for (_, p) in from.store.iter() {
        if let Some(id) = to.store.by_name(&p.name) {
            let dst = to.store.value_mut(id);
            if dst.shape() != p.value.shape() {
                bail!("initial checkpoint parameter {} has shape {:?}, model needs {:?}", p.name, p.value.shape(), dst.shape());
            }
            *dst = p.value.clone();
            copied += 1;
        }
    }
    Ok(copied)
}

fn check_tagset(model: &PolarModel, corpus: &Corpus) -> Result<()> {
    if corpus.roles.iter().any(|r| model.tagset.role_index(r).is_none()) {
        return Err(polar_core::Error::TagsetMismatch {
            checkpoint: model.tagset.roles().to_vec(),
            corpus: corpus.roles.clone(),
        }
        .into());
    }
    Ok(())
}

/// Builds the model for a run: fresh weights, optionally overwritten from
/// the initial checkpoint, whose vocabulary is then reused.
fn build_model(cfg: &RunConfig, train_corpus: &Corpus) -> Result<(PolarModel, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    match &cfg.init {
        Some(p) => {
            let init = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            check_tagset(&init, train_corpus)?;
            let mut model = PolarModel::new(cfg.model.clone(), init.tagset.clone(), init.vocab.clone(), &mut rng)?;
            let n = transfer(&init, &mut model)?;
            note(json!({"status": "info", "message": "initialized from checkpoint", "path": p.display().to_string(), "params": n}));
            Ok((model, true))
        }
        None => {
            let vocab = Vocab::build(&train_corpus.dialogues);
            let model = PolarModel::new(cfg.model.clone(), train_corpus.tagset()?, vocab, &mut rng)?;
            Ok((model, false))
        }
    }
}

fn progress(r: &LogRecord) {
    if !matches!(r, LogRecord::Step { .. }) {
        note(serde_json::to_value(r).unwrap_or_default());
    }
}

fn psp_pretrain(args: RunArgs) -> Result<()> {
    let cfg = run_config(&args)?;
    let out = cfg.require_out()?.to_path_buf();
    let corpus = load_corpus(cfg.require_train()?)?;
    let (mut model, _) = build_model(&cfg, &corpus)?;
    let log = train::psp_pretrain(&mut model, &corpus.dialogues, &cfg.training, &mut progress)?;
    fs::create_dir_all(&out)?;
    checkpoint::save(&model, &out.join("psp.ckpt"))?;
    model.vocab.save(&out.join("vocab.txt"))?;
    write_file(&out.join("psp_log.jsonl"), &train::log_to_jsonl(&log)?)?;
    note(json!({"status": "ok", "command": "psp-pretrain", "checkpoint": out.join("psp.ckpt").display().to_string()}));
    Ok(())
}

fn train_cmd(args: RunArgs) -> Result<()> {
    let cfg = run_config(&args)?;
    let out = cfg.require_out()?.to_path_buf();
    let corpus = load_corpus(cfg.require_train()?)?;
    let dev = cfg.dev.as_deref().map(load_corpus).transpose()?;
    let (mut model, initialized) = build_model(&cfg, &corpus)?;
    if let Some(d) = &dev {
        check_tagset(&model, d)?;
    }
    let mut log = Vec::new();
    if !cfg.model.ablations.no_psp && !initialized {
        log.extend(train::psp_pretrain(&mut model, &corpus.dialogues, &cfg.training, &mut progress)?);
    }
    let outcome = train::train(
        &mut model,
        &corpus.dialogues,
        dev.as_ref().map(|d| d.dialogues.as_slice()),
        &cfg.training,
        &mut progress,
    )?;
    log.extend(outcome.log);
    fs::create_dir_all(&out)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    model.vocab.save(&out.join("vocab.txt"))?;
    write_file(&out.join("metrics.jsonl"), &train::log_to_jsonl(&log)?)?;
    write_file(&out.join("config.toml"), &toml::to_string(&cfg).context("serializing config")?)?;
    note(json!({
        "status": "ok",
        "command": "train",
        "checkpoint": ckpt.display().to_string(),
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_dev_f1_all": outcome.best_dev.as_ref().map(|r| r.all.f1),
    }));
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let report = if args.gold_passthrough {
        evaluate(&corpus.dialogues, &corpus.dialogues)?
    } else {
        let path = args.checkpoint.as_deref().context("--checkpoint is required")?;
        let model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        check_tagset(&model, &corpus)?;
        train::evaluate_model(&model, &corpus.dialogues)?
    };
    print!("{}", report.to_table());
    if let Some(p) = &args.report {
        write_file(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let corpus = load_corpus(&args.corpus)?;
    check_tagset(&model, &corpus)?;
    let predicted: Vec<Dialogue> = train::predict_dialogues(&model, &corpus.dialogues)?;
    let out = Corpus::new(model.tagset.roles().to_vec(), corpus.speakers.clone(), predicted);
    write_file(&args.out, &out.to_jsonl()?)?;
    note(json!({"status": "ok", "command": "predict", "dialogues": out.len(), "out": args.out.display().to_string()}));
    Ok(())
}

fn matrix(s: &mut String, dump: &GraphDump, m: &[Vec<f64>]) {
    let _ = write!(s, "node");
    for (j, name) in dump.surfaces.iter().enumerate() {
        let mark = if j == dump.predicate { "*" } else { "" };
        let _ = write!(s, "\t{j}:{name}{mark}");
    }
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        let _ = write!(s, "{i}:{}", dump.surfaces[i]);
        for v in row {
            let _ = write!(s, "\t{v:.6}");
        }
        s.push('\n');
    }
}

/// Plain-text dump: both edge matrices with surface headers (the predicate
/// column carries a `*`) and the support size of each pruned row.
pub fn render_graph(dump: &GraphDump) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dialogue\t{}", dump.dialogue_id);
    let _ = writeln!(s, "nodes\t{}", dump.surfaces.len());
    let _ = writeln!(s, "predicate\t{}:{}", dump.predicate, dump.surfaces[dump.predicate]);
    let _ = writeln!(s, "alpha\t{:.6}", dump.alpha);
    let _ = writeln!(s, "\n[edges_raw]");
    matrix(&mut s, dump, &dump.edges_raw);
    let _ = writeln!(s, "\n[edges_pruned]");
    match &dump.edges_pruned {
        None => {
            let _ = writeln!(s, "pruning disabled");
        }
        Some(m) => matrix(&mut s, dump, m),
    }
    let _ = writeln!(s, "\n[support]");
    match &dump.support {
        None => {
            let _ = writeln!(s, "pruning disabled");
        }
        Some(sup) => {
            for (i, n) in sup.iter().enumerate() {
                let _ = writeln!(s, "{i}:{}\t{n}", dump.surfaces[i]);
            }
        }
    }
    s
}

fn inspect_cmd(args: InspectArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let corpus = load_corpus(&args.corpus)?;
    check_tagset(&model, &corpus)?;
    let d = match &args.dialogue_id {
        Some(id) => corpus
            .dialogues
            .iter()
            .find(|d| &d.dialogue_id == id)
            .with_context(|| format!("no dialogue {id:?} in {}", args.corpus.display()))?,
        None => corpus.dialogues.first().context("corpus is empty")?,
    };
    let dump = model.inspect_graph(d, &mut ChaCha8Rng::seed_from_u64(0))?;
    write_file(&args.out, &render_graph(&dump))?;
    note(json!({"status": "ok", "command": "inspect-graph", "nodes": dump.surfaces.len(), "out": args.out.display().to_string()}));
    Ok(())
}

fn diagnostic(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<polar_core::Error>())
        .map_or("cli", |e| e.kind());
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    json!({"status": "error", "kind": kind, "message": message})
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PspPretrain(a) => psp_pretrain(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::InspectGraph(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut stderr = std::io::stderr().lock();
            let _ = writeln!(stderr, "{}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}
