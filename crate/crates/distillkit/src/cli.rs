//! Command-line interface: vocabulary building, corpus synthesis,
//! distillation, pretraining, fine-tuning, evaluation, benchmarking and
//! checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use distillkit_core::corpus::{pack_corpus, synth_corpus, SynthSpec, TokenBlocks};
use distillkit_core::distill::DistillSuite;
use distillkit_core::encoder::{count_params, ModelState};
use distillkit_core::eval::{entity_f1, macro_prf, ranked_qa, MetricReport};
use distillkit_core::tokenizer::Vocab;
use distillkit_core::train::{
    evaluate_mlm, predict_seq_labels, predict_token_labels, run_distillation, run_finetune,
    run_mlm_pretrain, EvalPoint, FinetuneTask, RunMode, TrainObserver, TrainReport,
};

use crate::config::{load_run_spec, resolved_json, RunSpec};
use crate::manifest::RunManifest;
use crate::{bench, checkpoint, dataio, report, IoError};

#[derive(Parser)]
#[command(
    name = "distillkit",
    about = "Desk-scale knowledge distillation for BERT-style encoders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a WordPiece-style vocabulary from a text corpus.
    BuildVocab(BuildVocabArgs),
    /// Generate a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Distil a student from a teacher checkpoint.
    Distill(ConfigArgs),
    /// Continual MLM pretraining.
    Pretrain(ConfigArgs),
    /// Fine-tune on a labelled dataset.
    Finetune(ConfigArgs),
    /// Evaluate a checkpoint on a dataset, or score ranked answers.
    Eval(EvalArgs),
    /// Latency/memory/parameter benchmark over model shapes.
    Bench(BenchArgs),
    /// Print a checkpoint's architecture and parameter count.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Plain-text corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Target vocabulary size.
    #[arg(long)]
    size: usize,
    /// Keep case distinctions.
    #[arg(long)]
    cased: bool,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Grammar preset.
    #[arg(long, value_parser = ["general", "biomedical"])]
    preset: String,
    /// Number of sentences to generate.
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    /// Held-out fraction.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key overrides, e.g. `--set plan.suite=tiny_layerwise`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Task to score.
    #[arg(long, value_parser = ["ner", "re", "qa"])]
    task: String,
    /// Fine-tuned checkpoint (ner/re).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset: CoNLL for ner, TSV pairs for re.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Gold answers and ranked candidates (qa): `gold1|gold2<TAB>c1|c2|c3`.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Vocabulary file (ner/re).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Report binary P/R/F for this positive class instead of macro (re).
    #[arg(long)]
    binary_positive: Option<String>,
    /// Collapse sub-word predictions by majority vote instead of first
    /// sub-word (ner).
    #[arg(long)]
    majority: bool,
    /// Maximum encoded sequence length.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Output directory for the metric reports.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark the paper-scale shapes instead of the desk-scale ones.
    #[arg(long)]
    full: bool,
    /// Timed repetitions per grid point (at least 30).
    #[arg(long, default_value_t = bench::MIN_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Kernel-parallelism cap from `DISTILLKIT_THREADS`. Kernels are
/// single-threaded, so any positive value is trivially honored; zero or
/// garbage is rejected at startup.
pub fn thread_cap() -> Option<usize> {
    std::env::var("DISTILLKIT_THREADS").ok().and_then(|v| v.parse().ok())
}

fn validate_thread_cap() -> Result<(), String> {
    match std::env::var("DISTILLKIT_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("DISTILLKIT_THREADS must be a positive integer, got {raw:?}")),
        },
    }
}

/// Entry point used by `main` and by tests: parses `argv` (excluding the
/// program name) and returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let mut argv = vec!["distillkit".to_string()];
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders its own help/usage text
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(msg) = validate_thread_cap() {
        eprintln!("error: {msg}");
        return 1;
    }
    let outcome = match cli.command {
        Command::BuildVocab(args) => cmd_build_vocab(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Distill(args) => cmd_run(args, RunMode::Distill),
        Command::Pretrain(args) => cmd_run(args, RunMode::PretrainMlm),
        Command::Finetune(args) => cmd_run_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<IoError> for CliError {
    fn from(err: IoError) -> CliError {
        match err {
            // Missing or unreadable input files are usage errors.
            IoError::File { .. } | IoError::Format { .. } => CliError::Usage(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<distillkit_core::Error> for CliError {
    fn from(err: distillkit_core::Error) -> CliError {
        CliError::Runtime(err.to_string())
    }
}

type CmdResult = Result<(), CliError>;

fn cmd_build_vocab(args: BuildVocabArgs) -> CmdResult {
    let text = dataio::load_text(&args.corpus)?;
    let vocab = Vocab::build(&text, args.size, args.cased)?;
    dataio::save_vocab(&args.out, &vocab)?;
    let dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut manifest = RunManifest::new(
        "build-vocab",
        0,
        serde_json::json!({
            "corpus": args.corpus.display().to_string(),
            "size": args.size,
            "cased": args.cased,
            "out": args.out.display().to_string(),
        }),
    );
    manifest.add_artifact(&args.out)?;
    manifest.write(&dir)?;
    println!("vocabulary of {} pieces written to {}", vocab.size(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let spec = match args.preset.as_str() {
        "general" => SynthSpec::general(args.sentences, args.holdout),
        "biomedical" => SynthSpec::biomedical(args.sentences, args.holdout),
        other => return Err(CliError::Usage(format!("unknown preset {other:?}"))),
    };
    let corpus = synth_corpus(&spec, args.seed)?;
    let files = dataio::save_synth_corpus(&args.out_dir, &corpus)?;
    let mut manifest = RunManifest::new(
        "synth",
        args.seed,
        serde_json::json!({
            "preset": args.preset,
            "sentences": args.sentences,
            "holdout": args.holdout,
        }),
    );
    for f in &files {
        manifest.add_artifact(f)?;
    }
    manifest.write(&args.out_dir)?;
    println!(
        "{} train / {} held-out sentences written to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// Observer wiring wall-clock timing and periodic checkpoints into a run.
struct StdObserver {
    started: Instant,
    checkpoint_path: Option<PathBuf>,
}

impl StdObserver {
    fn new(checkpoint_path: Option<PathBuf>) -> StdObserver {
        StdObserver { started: Instant::now(), checkpoint_path }
    }
}

impl TrainObserver for StdObserver {
    fn now_ms(&mut self) -> Option<f64> {
        Some(self.started.elapsed().as_secs_f64() * 1000.0)
    }

    fn on_eval(&mut self, state: &ModelState, point: &EvalPoint) {
        eprintln!(
            "step {:>7}  loss {:<10.4} acc {:<8.4} {:.1} ms/step",
            point.step, point.loss, point.accuracy, point.ms_per_step
        );
        if let Some(path) = &self.checkpoint_path {
            if let Err(err) = checkpoint::save_checkpoint(path, state) {
                eprintln!("warning: checkpoint at step {} failed: {err}", point.step);
            }
        }
    }
}

fn load_blocks(spec: &RunSpec, vocab: &Vocab) -> Result<(TokenBlocks, Option<TokenBlocks>), CliError> {
    let corpus_path = spec
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Usage("config is missing `corpus`".to_string()))?;
    let text = dataio::load_text(Path::new(corpus_path))?;
    let blocks = pack_corpus(&text, vocab, spec.run.max_len);
    let heldout = match &spec.heldout {
        Some(path) => {
            let text = dataio::load_text(Path::new(path))?;
            Some(pack_corpus(&text, vocab, spec.run.max_len))
        }
        None => None,
    };
    Ok((blocks, heldout))
}

fn finish_run(
    command: &str,
    spec: &RunSpec,
    state: &ModelState,
    train_report: &TrainReport,
) -> Result<PathBuf, CliError> {
    let out_dir = PathBuf::from(&spec.output_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let ckpt = out_dir.join("final.ckpt");
    checkpoint::save_checkpoint(&ckpt, state)?;
    let report_path = out_dir.join("train_report.csv");
    report::save_train_report(&report_path, train_report)?;
    let mut manifest = RunManifest::new(command, spec.run.seed, resolved_json(spec));
    manifest.add_artifact(&ckpt)?;
    manifest.add_artifact(&out_dir.join("final.ckpt.bin"))?;
    manifest.add_artifact(&report_path)?;
    manifest.write(&out_dir)?;
    Ok(ckpt)
}

fn cmd_run(args: ConfigArgs, mode: RunMode) -> CmdResult {
    let mut spec = load_run_spec(&args.config, &args.overrides)?;
    spec.run.mode = mode;
    let vocab = dataio::load_vocab(Path::new(&spec.vocab), None)?;
    let (blocks, heldout) = load_blocks(&spec, &vocab)?;
    let out_dir = PathBuf::from(&spec.output_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut observer = StdObserver::new(Some(out_dir.join("latest.ckpt")));

    let (state, train_report) = match mode {
        RunMode::Distill => {
            let teacher_path = spec
                .teacher_checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("distill requires `teacher_checkpoint`".into()))?;
            let teacher = checkpoint::load_checkpoint(Path::new(teacher_path))?;
            let student_config = spec
                .student
                .clone()
                .ok_or_else(|| CliError::Usage("distill requires `student`".into()))?;
            let plan_spec = spec
                .plan
                .clone()
                .ok_or_else(|| CliError::Usage("distill requires `plan`".into()))?;
            let plan = plan_spec.build(&student_config, &teacher.config, spec.run.seed)?;
            eprintln!(
                "distilling {} ({} params) from teacher ({} params) with {}",
                student_config.num_layers,
                count_params(&student_config),
                count_params(&teacher.config),
                plan.suite.name()
            );
            run_distillation(
                &teacher,
                &student_config,
                plan,
                &blocks,
                &vocab,
                &spec.run,
                &mut observer,
            )?
        }
        RunMode::PretrainMlm => {
            let init = match (&spec.init_checkpoint, &spec.student) {
                (Some(path), _) => checkpoint::load_checkpoint(Path::new(path))?,
                (None, Some(config)) => ModelState::init(config, spec.run.seed)?,
                (None, None) => {
                    return Err(CliError::Usage(
                        "pretrain requires `init_checkpoint` or `student`".into(),
                    ))
                }
            };
            run_mlm_pretrain(init, &blocks, &vocab, &spec.run, heldout.as_ref(), &mut observer)?
        }
        _ => unreachable!("cmd_run handles distill and pretrain only"),
    };
    let ckpt = finish_run(
        match mode {
            RunMode::Distill => "distill",
            _ => "pretrain",
        },
        &spec,
        &state,
        &train_report,
    )?;
    println!("final checkpoint: {}", ckpt.display());
    if let Some(heldout) = heldout {
        let (loss, acc) = evaluate_mlm(
            &state,
            &heldout,
            &vocab,
            &spec.run.mask_policy,
            spec.run.batch_size,
            spec.run.seed ^ 0xabcd,
            16,
        )?;
        println!("held-out masked LM: loss {loss:.4} top-1 {acc:.4}");
    }
    Ok(())
}

fn cmd_run_finetune(args: ConfigArgs) -> CmdResult {
    let spec = load_run_spec(&args.config, &args.overrides)?;
    if spec.run.mode != RunMode::FinetuneToken && spec.run.mode != RunMode::FinetuneSeq {
        return Err(CliError::Usage(
            "finetune requires run.mode of finetune_token or finetune_seq".into(),
        ));
    }
    let vocab = dataio::load_vocab(Path::new(&spec.vocab), None)?;
    let init = match &spec.init_checkpoint {
        Some(path) => checkpoint::load_checkpoint(Path::new(path))?,
        None => return Err(CliError::Usage("finetune requires `init_checkpoint`".into())),
    };
    let data_path = spec
        .dataset
        .clone()
        .ok_or_else(|| CliError::Usage("finetune requires `dataset`".into()))?;
    let out_dir = PathBuf::from(&spec.output_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let mut observer = StdObserver::new(Some(out_dir.join("latest.ckpt")));

    let token_records;
    let seq_records;
    let task = match spec.run.mode {
        RunMode::FinetuneToken => {
            token_records = dataio::load_conll(Path::new(&data_path))?;
            FinetuneTask::Token(&token_records)
        }
        _ => {
            seq_records = dataio::load_pairs(Path::new(&data_path))?;
            FinetuneTask::Seq(&seq_records)
        }
    };
    let (state, train_report) = run_finetune(init, &task, &vocab, &spec.run, &mut observer)?;
    let ckpt = finish_run("finetune", &spec, &state, &train_report)?;
    println!("final checkpoint: {}", ckpt.display());
    if let Some(acc) = train_report.metric("accuracy") {
        println!("final training accuracy: {acc:.4}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let (name, metric): (&str, MetricReport) = match args.task.as_str() {
        "qa" => {
            let pred_path = args
                .pred
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task qa requires --pred".into()))?;
            let (gold, pred) = dataio::load_qa_rankings(pred_path)?;
            ("qa", ranked_qa(&gold, &pred)?)
        }
        task => {
            let ckpt_path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task ner/re requires --checkpoint".into()))?;
            let data_path = args
                .data
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task ner/re requires --data".into()))?;
            let vocab_path = args
                .vocab
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task ner/re requires --vocab".into()))?;
            let state = checkpoint::load_checkpoint(ckpt_path)?;
            let vocab = dataio::load_vocab(vocab_path, None)?;
            if task == "ner" {
                let records = dataio::load_conll(data_path)?;
                let preds =
                    predict_token_labels(&state, &records, &vocab, args.max_len, args.majority)?;
                let gold: Vec<Vec<String>> = records.iter().map(|r| r.labels.clone()).collect();
                ("ner", entity_f1(&gold, &preds)?)
            } else {
                let records = dataio::load_pairs(data_path)?;
                let preds = predict_seq_labels(&state, &records, &vocab, args.max_len)?;
                let gold: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
                let metric = match &args.binary_positive {
                    Some(positive) => distillkit_core::eval::binary_prf(&gold, &preds, positive)?,
                    None => {
                        let classes = distillkit_core::corpus::pair_label_set(&records);
                        macro_prf(&gold, &preds, &classes)?
                    }
                };
                ("re", metric)
            }
        }
    };
    let files = report::save_metric_report(&args.out_dir, name, &metric)?;
    print!("{}", report::metric_report_table(name, &metric));
    let mut manifest = RunManifest::new(
        "eval",
        0,
        serde_json::json!({ "task": args.task, "majority": args.majority }),
    );
    for f in &files {
        manifest.add_artifact(f)?;
    }
    manifest.write(&args.out_dir)?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    if args.reps < bench::MIN_REPS {
        return Err(CliError::Usage(format!("--reps must be at least {}", bench::MIN_REPS)));
    }
    let configs = if args.full { bench::presets_full() } else { bench::presets_desk() };
    let grid = bench::default_grid();
    let report = bench::run_bench(&configs, &grid, args.reps, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out_dir.display())))?;
    let csv_path = args.out_dir.join("bench.csv");
    std::fs::write(&csv_path, bench::bench_csv(&report))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    let json_path = args.out_dir.join("bench.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report).map_err(IoError::Json)?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", json_path.display())))?;
    let mut manifest = RunManifest::new(
        "bench",
        args.seed,
        serde_json::json!({ "full": args.full, "reps": args.reps }),
    );
    manifest.add_artifact(&csv_path)?;
    manifest.add_artifact(&json_path)?;
    manifest.write(&args.out_dir)?;
    print!("{}", bench::bench_csv(&report));
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    let state = checkpoint::load_checkpoint(&args.checkpoint)?;
    let config_json = serde_json::to_string_pretty(&state.config).map_err(IoError::Json)?;
    println!("{config_json}");
    println!("parameters (closed form): {}", count_params(&state.config));
    println!("parameters (stored):      {}", state.param_count());
    if let Some(labels) = &state.task_labels {
        println!("task labels: {labels:?}");
    }
    Ok(())
}

/// Suites accepted on the command line (documented for the help text).
pub fn known_suites() -> Vec<&'static str> {
    vec![
        DistillSuite::DistilTriple.name(),
        DistillSuite::TinyLayerwise.name(),
        DistillSuite::CompactHybrid.name(),
        DistillSuite::MobileLayerwise.name(),
    ]
}
