//! `tmm`: generate synthetic data, train, evaluate, predict, export attention,
//! check gradients and compare against the single-aspect baseline.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmm::attention::attention_map;
use tmm::checkpoint::Checkpoint;
use tmm::compare::compare;
use tmm::data::{compute_stats, generate_synthetic, load_corpus, Corpus, SyntheticSpec, Task};
use tmm::diagnostics::{op_kind_from_name, run_grad_checks};
use tmm::encoder::LayerSelector;
use tmm::train::{train_runs, RunConfig, Scheme, TrainError};

#[derive(Parser)]
#[command(name = "tmm", version, about = "Multi-aspect transformer sentiment classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic train/dev/test splits to a directory.
    GenData(GenData),
    /// Train and write one checkpoint per run plus a report.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled corpus file.
    Evaluate(Evaluate),
    /// Label every aspect of a corpus file.
    Predict(Predict),
    /// Export head-averaged attention of one record as a matrix and a heatmap.
    Attn(Attn),
    /// Finite-difference check of every primitive and of the full loss.
    GradCheck(GradCheck),
    /// Train both schemes under the same budget and report the difference.
    Compare(TrainArgs),
}

#[derive(Args)]
struct GenData {
    /// TOML generator spec; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<Task>,
    /// Probability that a sentence carries a distractor cue.
    #[arg(long)]
    cross_prob: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.jsonl, dev.jsonl and optionally test.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheme: Option<Scheme>,
}

#[derive(Args)]
struct Evaluate {
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Predict {
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Attn {
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which record of the file to render (0-based).
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// 0-based layer index or `all`.
    #[arg(long, default_value = "all")]
    layer: LayerSelector,
    /// Output directory for attention.tsv, attention.json and attention.html.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheck {
    /// Write the JSON report here as well as to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupt one primitive's backward rule (negative control).
    #[arg(long, hide = true)]
    corrupt_backward: Option<String>,
}

enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(invalid)
}

fn run_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.scheme {
        cfg.scheme = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path, name: &str, task: Task) -> Result<Corpus, Failure> {
    load_corpus(&dir.join(format!("{name}.jsonl")), task).map_err(invalid)
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    let mut spec = match &args.config {
        Some(p) => SyntheticSpec::from_toml(&fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?)
            .map_err(invalid)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(t) = args.task {
        spec.task = t;
    }
    if let Some(p) = args.cross_prob {
        spec.cross_aspect_cue_prob = p;
    }
    let corpora = generate_synthetic(&spec).map_err(invalid)?;
    create_dir(&args.out)?;
    for (name, c) in [("train", &corpora.train), ("dev", &corpora.dev), ("test", &corpora.test)] {
        c.save(&args.out.join(format!("{name}.jsonl"))).map_err(invalid)?;
        println!("{name:<5} {}", compute_stats(c));
    }
    write(&args.out.join("spec.toml"), spec.to_toml())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = run_config(&args)?;
    let train = load_split(&args.data, "train", cfg.task)?;
    let dev = load_split(&args.data, "dev", cfg.task)?;
    let test_path = args.data.join("test.jsonl");
    let test = if test_path.exists() {
        load_corpus(&test_path, cfg.task).map_err(invalid)?
    } else {
        dev.clone()
    };
    let outcome = train_runs(&cfg, &train, &dev, &test)?;
    create_dir(&args.out)?;
    let mut runs = Vec::new();
    for (run, eval) in outcome.runs.iter().zip(&outcome.test) {
        Checkpoint::from(run)
            .save(&args.out.join(format!("seed-{}.ckpt", run.seed)))
            .map_err(invalid)?;
        println!(
            "seed {}: best epoch {} of {} ({:?}), test macro_f1 {:.4} accuracy {:.4}",
            run.seed,
            run.best_epoch,
            run.history.len(),
            run.stop,
            eval.report.macro_f1,
            eval.report.accuracy
        );
        runs.push(serde_json::json!({
            "seed": run.seed,
            "best_epoch": run.best_epoch,
            "stop": run.stop,
            "history": run.history,
            "test": eval.report,
            "test_forward_passes": eval.forward_passes,
            "train_forward_passes": run.train_forward_passes,
        }));
    }
    Checkpoint::from(outcome.best_run())
        .save(&args.out.join("model.ckpt"))
        .map_err(invalid)?;
    let report = serde_json::json!({
        "config": cfg,
        "test_split": if test_path.exists() { "test" } else { "dev" },
        "runs": runs,
        "mean_test": outcome.mean_test,
    });
    write(&args.out.join("report.json"), serde_json::to_string_pretty(&report).expect("json"))?;
    println!(
        "mean over {} runs: macro_f1 {:.4} accuracy {:.4}",
        outcome.runs.len(),
        outcome.mean_test.macro_f1,
        outcome.mean_test.accuracy
    );
    Ok(())
}

fn evaluate(args: Evaluate) -> Result<(), Failure> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data, ck.model.task).map_err(invalid)?;
    let eval = ck.model.evaluate(&corpus)?;
    println!("{}", eval.report);
    if let Some(out) = args.out {
        write(&out, eval.report.to_json())?;
    }
    Ok(())
}

fn predict(args: Predict) -> Result<(), Failure> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data, ck.model.task).map_err(invalid)?;
    let predictions = ck.model.predict(&corpus)?;
    let mut out = String::from(tmm::data::FORMAT_HEADER);
    out.push('\n');
    for (sentence, dist) in corpus.sentences.iter().zip(&predictions.distributions) {
        let mut record = sentence.to_record();
        for ((aspect, probs), label) in record.aspects.iter_mut().zip(&dist.0).zip(dist.predictions()) {
            aspect.predicted = Some(label);
            aspect.probabilities = Some(*probs);
        }
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    match args.out {
        Some(p) => write(&p, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn attn(args: Attn) -> Result<(), Failure> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data, ck.model.task).map_err(invalid)?;
    let sentence = corpus.sentences.get(args.index).ok_or_else(|| {
        invalid(format!("record {} requested but the file has {}", args.index, corpus.len()))
    })?;
    let map = attention_map(&ck.model, &sentence.example, args.layer)?;
    create_dir(&args.out)?;
    write(&args.out.join("attention.tsv"), map.to_tsv())?;
    write(&args.out.join("attention.json"), map.to_json())?;
    write(&args.out.join("attention.html"), map.to_html())?;
    println!("wrote {}", args.out.join("attention.html").display());
    Ok(())
}

fn grad_check(args: GradCheck) -> Result<(), Failure> {
    let fault = match &args.corrupt_backward {
        Some(name) => Some(op_kind_from_name(name).ok_or_else(|| invalid(format!("unknown primitive '{name}'")))?),
        None => None,
    };
    let report = run_grad_checks(fault).map_err(|e| Failure::Numerical(e.to_string()))?;
    let json = report.to_json();
    println!("{json}");
    if let Some(p) = args.out {
        write(&p, &json)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        Err(Failure::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn compare_cmd(args: TrainArgs) -> Result<(), Failure> {
    let cfg = run_config(&args)?;
    let train = load_split(&args.data, "train", cfg.task)?;
    let dev = load_split(&args.data, "dev", cfg.task)?;
    let test = load_split(&args.data, "test", cfg.task)?;
    let (report, _, _) = compare(&cfg, &train, &dev, &test)?;
    create_dir(&args.out)?;
    write(&args.out.join("comparison.json"), report.to_json())?;
    println!(
        "tmm      macro_f1 {:.4} accuracy {:.4}",
        report.tmm.mean.macro_f1, report.tmm.mean.accuracy
    );
    println!(
        "baseline macro_f1 {:.4} accuracy {:.4}",
        report.baseline.mean.macro_f1, report.baseline.mean.accuracy
    );
    println!(
        "delta    macro_f1 {:+.4} accuracy {:+.4}",
        report.delta_macro_f1, report.delta_accuracy
    );
    println!(
        "test forward passes: tmm {} (sentences {}), baseline {} (aspects {})",
        report.tmm.runs[0].test_forward_passes,
        report.test_sentences,
        report.baseline.runs[0].test_forward_passes,
        report.test_aspects
    );
    if !report.forward_counts_match {
        return Err(Failure::Invalid("forward-pass counts do not match sentence and aspect counts".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Attn(a) => attn(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
    }
}
