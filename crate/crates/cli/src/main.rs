//! `dialogue`: command-line driver for the few-shot dialogue pipeline.
//!
//!   gen-corpus     write a synthetic multi-domain corpus
//!   pretrain       build the vocabulary and train the dialogue prior
//!   adapt-predict  build adaptation instances and predict each one
//!   evaluate       score predictions against gold instances
//!   stats          generated/retrieved breakdown of a predictions file
//!
//! Every subcommand accepts `--config FILE` with `key = value` lines named
//! after the long flags. Flags given on the command line win.
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments or missing
//! input files.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dialogue_core::baselines::{bag_embed_encoder, predict_baseline};
use dialogue_core::corpus::{
    corpus_to_string, gen_synthetic_corpus, load_corpus, make_instances, AdaptationInstance, Corpus, InstanceConfig,
    InstanceRecord, Mode, SyntheticSpec, TargetPositions, DEFAULT_CONTEXT_WINDOW,
};
use dialogue_core::decoding::DecodeConfig;
use dialogue_core::eval::{evaluate_run, EvalConfig, ROUGE_BETA};
use dialogue_core::hybrid::{gen_ret_stats, predict_batch, render_gen_ret, PredictOptions, Prediction, PredictionFailure};
use dialogue_core::nnet::{init_model, Checkpoint, ModelConfig};
use dialogue_core::tokenizer::{build_vocab, Vocab};
use dialogue_core::training::{train_base, TrainConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "dialogue", version, about = "Hybrid generative-retrieval few-shot dialogue model")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Build the vocabulary and train the dialogue prior.
    Pretrain(PretrainArgs),
    /// Build adaptation instances and predict a response for each.
    AdaptPredict(AdaptArgs),
    /// Score one or more prediction files against gold instances.
    Evaluate(EvaluateArgs),
    /// Generated/retrieved percentages per domain.
    Stats(StatsArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 2)]
    tasks: usize,
    #[arg(long, default_value_t = 10)]
    dialogues: usize,
    #[arg(long, default_value_t = 8)]
    turns: usize,
    #[arg(long, default_value_t = 30)]
    vocab_per_domain: usize,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Receives prior.ckpt, vocab.txt, metrics.jsonl and train.log.
    #[arg(long)]
    out_dir: PathBuf,
    /// Only dialogues from these domains are used (comma separated).
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_CONTEXT_WINDOW)]
    context_window: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 96)]
    max_seq: usize,
    #[arg(long, default_value_t = 8)]
    max_turns: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

#[derive(Args, Debug, Serialize)]
struct AdaptArgs {
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Receives instances.jsonl, predictions.jsonl, failures.jsonl and
    /// instances.txt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Reuse an instances file instead of building new instances.
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Target domains when building instances (comma separated).
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
    #[arg(long, default_value = "pure")]
    mode: Mode,
    #[arg(long, default_value_t = 3)]
    support_size: usize,
    #[arg(long, default_value_t = 0)]
    instance_seed: u64,
    /// Predict only the last user turn of each target dialogue.
    #[arg(long)]
    final_turn_only: bool,
    /// Keep the first N instances by id.
    #[arg(long)]
    limit: Option<usize>,
    /// Skip fine-tuning on the support set.
    #[arg(long)]
    no_support: bool,
    /// Skip retrieval; always return the generated candidate.
    #[arg(long)]
    no_retrieval: bool,
    /// Run the bag-of-embeddings retrieval baseline instead of the model.
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 64)]
    baseline_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 20)]
    max_response_tokens: usize,
    #[arg(long, default_value_t = 0)]
    decode_seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    instances: PathBuf,
    /// Receives report.txt, report.jsonl and scores.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = ROUGE_BETA)]
    rouge_beta: f64,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Receives gen_ret.txt and gen_ret.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = validate(&cli.command) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::AdaptPredict(a) => cmd_adapt_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Debug)]
struct MissingInput(PathBuf);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input file {} does not exist", self.0.display())
    }
}

/// Every input path must exist before any work starts.
fn validate(command: &Command) -> Result<(), MissingInput> {
    let inputs: Vec<&PathBuf> = match command {
        Command::GenCorpus(_) => vec![],
        Command::Pretrain(a) => vec![&a.corpus],
        Command::AdaptPredict(a) => [Some(&a.vocab), Some(&a.corpus), a.checkpoint.as_ref(), a.instances.as_ref()]
            .into_iter()
            .flatten()
            .collect(),
        Command::Evaluate(a) => a.predictions.iter().chain([&a.instances]).collect(),
        Command::Stats(a) => vec![&a.predictions],
    };
    match inputs.into_iter().find(|p| !p.exists()) {
        Some(p) => Err(MissingInput(p.clone())),
        None => Ok(()),
    }
}

/// Splices `--config FILE` entries in right after the subcommand so that
/// later command-line flags override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("{path}:{}: expected key = value", n + 1))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match v {
            "true" => extra.push(format!("--{k}")),
            "false" => {}
            _ => {
                extra.push(format!("--{k}"));
                extra.push(v.to_string());
            }
        }
    }
    // argv[0] is the binary and argv[1] the subcommand
    let at = rest.len().min(2);
    rest.splice(at..at, extra);
    Ok(rest)
}

fn header(command: &str, args: &impl Serialize, seeds: &[(&str, u64)]) -> Result<String> {
    let mut h = format!("# dialogue {VERSION}\n# command: {command}\n");
    h.push_str(&format!("# config: {}\n", serde_json::to_string(args)?));
    let seeds: Vec<String> = seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
    h.push_str(&format!("# seeds: {}\n", seeds.join(" ")));
    Ok(h)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn jsonl<T: Serialize>(head: &str, items: &[T]) -> Result<String> {
    let mut out = head.to_string();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn restrict(corpus: Corpus, domains: &[String]) -> Result<Corpus> {
    if domains.is_empty() {
        return Ok(corpus);
    }
    let kept = corpus.filter(|d| domains.contains(&d.domain))?;
    if kept.is_empty() {
        bail!("no dialogues in domains {domains:?}");
    }
    Ok(kept)
}

fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = SyntheticSpec::new(a.domains, a.tasks, a.dialogues, a.turns, a.vocab_per_domain);
    let corpus = gen_synthetic_corpus(&spec, a.seed)?;
    let text = header("gen-corpus", a, &[("corpus_seed", a.seed)])? + &corpus_to_string(&corpus);
    write_atomic(&a.out, text.as_bytes())?;
    println!("wrote {} dialogues to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let corpus = restrict(load_corpus(&a.corpus)?, &a.domains)?;
    let vocab = build_vocab(&corpus, a.vocab_size)?;
    let config = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.d_model,
        d_ff: a.d_ff,
        vocab_size: vocab.len(),
        max_seq: a.max_seq,
        max_turns: a.max_turns,
        dropout_rate: a.dropout,
        init_seed: a.init_seed,
    };
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        grad_clip_norm: a.grad_clip,
        seed: a.seed,
        context_window: a.context_window,
        validation_fraction: a.validation_fraction,
        ..TrainConfig::default()
    };
    let model = init_model(&config)?;
    let run = train_base(&corpus, &vocab, model, &tc)?;
    let seeds = [("train_seed", a.seed), ("init_seed", a.init_seed)];
    let head = header("pretrain", a, &seeds)?;

    create_dir(&a.out_dir)?;
    let prior = run
        .prior
        .clone()
        .with_meta("tool_version", VERSION)
        .with_meta("train_seed", &a.seed.to_string())
        .with_meta("init_seed", &a.init_seed.to_string())
        .with_meta("best_epoch", &run.best_epoch.to_string())
        .with_meta("config", &serde_json::to_string(a)?);
    write_atomic(&a.out_dir.join("vocab.txt"), vocab.to_text().as_bytes())?;
    write_atomic(&a.out_dir.join("metrics.jsonl"), jsonl(&head, &run.metrics)?.as_bytes())?;
    let log: String = run.log.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(&a.out_dir.join("train.log"), (head + &log).as_bytes())?;
    write_atomic(&a.out_dir.join("prior.ckpt"), &prior.to_bytes())?;
    for line in &run.log {
        eprintln!("{line}");
    }
    println!(
        "best epoch {} of {} ({}); prior written to {}",
        run.best_epoch,
        run.epochs_run,
        if run.stopped_early { "stopped early" } else { "ran to max epochs" },
        a.out_dir.join("prior.ckpt").display()
    );
    Ok(())
}

fn load_instances(a: &AdaptArgs, corpus: &Corpus) -> Result<(Vec<AdaptationInstance>, Option<String>)> {
    if let Some(path) = &a.instances {
        let records: Vec<InstanceRecord> = read_jsonl(path)?;
        let instances = records
            .iter()
            .map(|r| AdaptationInstance::from_record(r, corpus))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok((instances, None));
    }
    let targets = restrict(corpus.clone(), &a.domains)?;
    let cfg = InstanceConfig {
        targets: if a.final_turn_only { TargetPositions::FinalTurnOnly } else { TargetPositions::AllUserTurns },
        ..InstanceConfig::new(a.mode, a.support_size, a.instance_seed)
    };
    let set = make_instances(corpus, &cfg)?;
    let ids: Vec<&str> = targets.dialogues().iter().map(|d| d.id.as_str()).collect();
    let instances = set.instances.into_iter().filter(|i| ids.contains(&i.target_id.as_str())).collect();
    Ok((instances, Some(set.summary.render())))
}

fn cmd_adapt_predict(a: &AdaptArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocab::load(&a.vocab)?;
    let (mut instances, summary) = load_instances(a, &corpus)?;
    instances.sort_by(|x, y| x.id.cmp(&y.id));
    if let Some(n) = a.limit {
        instances.truncate(n);
    }
    if instances.is_empty() {
        bail!("no adaptation instances");
    }
    let seeds = [
        ("instance_seed", a.instance_seed),
        ("finetune_seed", a.seed),
        ("decode_seed", a.decode_seed),
    ];
    let head = header("adapt-predict", a, &seeds)?;

    let (predictions, failures, digest) = if a.baseline {
        let encoder = bag_embed_encoder(&vocab, a.baseline_dim)?;
        let mut preds = Vec::new();
        let mut fails = Vec::new();
        for inst in &instances {
            match predict_baseline(&encoder, inst, DEFAULT_CONTEXT_WINDOW) {
                Ok(p) => preds.push(p),
                Err(e) => fails.push(PredictionFailure {
                    instance_id: inst.id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        (preds, fails, None)
    } else {
        let path = a.checkpoint.as_ref().context("--checkpoint is required")?;
        let prior = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let tc = TrainConfig {
            learning_rate: a.lr,
            finetune_epochs: a.finetune_epochs,
            seed: a.seed,
            ..TrainConfig::default()
        };
        let dc = DecodeConfig {
            top_p: a.top_p,
            max_response_tokens: a.max_response_tokens,
            rng_seed: a.decode_seed,
        };
        let opts = PredictOptions {
            use_support: !a.no_support,
            use_retrieval: !a.no_retrieval,
        };
        let out = predict_batch(&prior, &instances, &vocab, &tc, &dc, opts, a.workers)?;
        (out.predictions, out.failures, Some(out.prior_digest))
    };

    create_dir(&a.out_dir)?;
    let records: Vec<InstanceRecord> = instances.iter().map(AdaptationInstance::to_record).collect();
    write_atomic(&a.out_dir.join("instances.jsonl"), jsonl(&head, &records)?.as_bytes())?;
    let mut pred_head = head.clone();
    if let Some(d) = &digest {
        pred_head.push_str(&format!("# prior_digest: {d}\n"));
    }
    write_atomic(&a.out_dir.join("predictions.jsonl"), jsonl(&pred_head, &predictions)?.as_bytes())?;
    write_atomic(&a.out_dir.join("failures.jsonl"), jsonl(&head, &failures)?.as_bytes())?;
    if let Some(s) = summary {
        write_atomic(&a.out_dir.join("instances.txt"), (head + &s).as_bytes())?;
    }
    for f in &failures {
        eprintln!("instance {} failed: {}", f.instance_id, f.error);
    }
    println!(
        "{} predictions, {} failures written to {}",
        predictions.len(),
        failures.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let gold: Vec<InstanceRecord> = read_jsonl(&a.instances)?;
    let mut predictions: Vec<Prediction> = Vec::new();
    for p in &a.predictions {
        predictions.extend(read_jsonl::<Prediction>(p)?);
    }
    let report = evaluate_run(&predictions, &gold, &EvalConfig { rouge_beta: a.rouge_beta })?;
    let head = header("evaluate", a, &[])?;
    let table = report.render();
    create_dir(&a.out_dir)?;
    write_atomic(&a.out_dir.join("report.txt"), format!("{head}{table}").as_bytes())?;
    write_atomic(&a.out_dir.join("report.jsonl"), jsonl(&head, &report.rows)?.as_bytes())?;
    write_atomic(&a.out_dir.join("scores.jsonl"), jsonl(&head, &report.instances)?.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let predictions: Vec<Prediction> = read_jsonl(&a.predictions)?;
    let rows = gen_ret_stats(&predictions)?;
    let head = header("stats", a, &[])?;
    let table = render_gen_ret(&rows);
    create_dir(&a.out_dir)?;
    write_atomic(&a.out_dir.join("gen_ret.txt"), format!("{head}{table}").as_bytes())?;
    write_atomic(&a.out_dir.join("gen_ret.jsonl"), jsonl(&head, &rows)?.as_bytes())?;
    print!("{table}");
    Ok(())
}
