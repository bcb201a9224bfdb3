//! Command-line experiment runner.
//!
//! All knobs live in one TOML config file (every section optional); a few
//! common ones also exist as flag overrides. Every run writes a
//! `<out>.manifest.toml` with the effective config, seed, and code version
//! beside its output. Exit codes: 0 success, 2 configuration error,
//! 3 integrity error.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use semcom::baseline::CodecConfig;
use semcom::eval::{
    ablation_rows, published_base_config, run_baseline_eval, run_sweep, table1_rows,
    write_ablation_csv, write_baseline_csv, write_sweep_csv, write_table1_csv, SweepConfig,
    TaskFilter,
};
use semcom::fem::{FemConfig, FemParams};
use semcom::model::{Model, ModelConfig};
use semcom::tasks::{build_corpus, Corpus, Vocabulary};
use semcom::training::{load_checkpoint, write_trace_csv, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "semcom", version, about = "Task-oriented semantic communication testbed")]
struct Cli {
    /// TOML config file; missing sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic prompted-task corpus and export it.
    GenCorpus(GenCorpusArgs),
    /// Phase 1: train encoder/decoder with no compression.
    TrainPhase1(TrainPhase1Args),
    /// Phase 2: joint training with the feature extractor, from a phase-1
    /// checkpoint.
    TrainPhase2(TrainPhase2Args),
    /// Accuracy and compression-ratio sweep over an SNR grid.
    EvalSweep(EvalSweepArgs),
    /// Expert-count or extractor-count ablation table.
    Ablate(AblateArgs),
    /// Analytic parameter/FLOPs table, including published-dimension check
    /// rows.
    Table1(Table1Args),
    /// Classical coded-transmission baseline evaluation.
    BaselineEval(BaselineEvalArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value = "corpus.txt")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainPhase1Args {
    /// Corpus file from gen-corpus; generated from config when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "phase1.ckpt")]
    out: PathBuf,
    /// Training-trace CSV path.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainPhase2Args {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Phase-1 checkpoint to resume from.
    #[arg(long)]
    init: PathBuf,
    #[arg(long, default_value = "phase2.ckpt")]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalSweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// train | held_out | all
    #[arg(long)]
    tasks: Option<String>,
    /// Send every row (phase-1 style) instead of running the extractor.
    #[arg(long)]
    no_fem: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation axis: m (experts) or b (extractor modules).
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Comma-separated checkpoints aligned with values; use `-` or omit
    /// trailing entries for untrained points (emitted as gaps).
    #[arg(long, default_value = "")]
    checkpoints: String,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct Table1Args {
    #[arg(long, default_value = "table1.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "baseline.csv")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorpusSection {
    seed: u64,
    train_per_task: usize,
    eval_per_task: usize,
}

impl CorpusSection {
    fn or_defaults(mut self) -> Self {
        if self.train_per_task == 0 {
            self.train_per_task = 1000;
        }
        if self.eval_per_task == 0 {
            self.eval_per_task = 600;
        }
        self
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    fem: FemConfig,
    train: TrainConfig,
    corpus: CorpusSection,
    eval: SweepConfig,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Integrity(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Integrity(m) => write!(f, "integrity error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Model(_) => CliError::Config(e.to_string()),
            TrainError::VersionMismatch { .. }
            | TrainError::Integrity(_)
            | TrainError::ShapeMismatch { .. } => CliError::Integrity(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Runtime(e.to_string()),
            TrainError::Io(e) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// The model must address exactly the corpus vocabulary.
fn resolve_model_config(cfg: &FileConfig, vocab: &Vocabulary) -> Result<ModelConfig, CliError> {
    let mut mc = cfg.model.clone();
    if mc == ModelConfig::default() || mc.vocab == ModelConfig::default().vocab {
        mc.vocab = vocab.len();
    } else if mc.vocab != vocab.len() {
        return Err(CliError::Config(format!(
            "model.vocab = {} but the vocabulary has {} entries",
            mc.vocab,
            vocab.len()
        )));
    }
    mc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(mc)
}

fn obtain_corpus(
    vocab: &Vocabulary,
    cfg: &FileConfig,
    path: &Option<PathBuf>,
) -> Result<Corpus, CliError> {
    match path {
        Some(p) => {
            let file = fs::File::open(p)
                .map_err(|e| CliError::Config(format!("cannot open {}: {e}", p.display())))?;
            Corpus::import(vocab, BufReader::new(file))
                .map_err(|e| CliError::Integrity(e.to_string()))
        }
        None => {
            let c = cfg.corpus.clone().or_defaults();
            Ok(build_corpus(vocab, c.seed, c.train_per_task, c.eval_per_task))
        }
    }
}

fn load_ckpt(path: &Path) -> Result<(Model, FemParams), CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

fn write_manifest(out: &Path, command: &str, cfg: &FileConfig, seed: u64) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        version: &'a str,
        seed: u64,
        config: &'a FileConfig,
    }
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
    let path = out.with_extension(format!(
        "{}manifest.toml",
        out.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.config)?;
    let vocab = Vocabulary::standard();
    match cli.command {
        Command::GenCorpus(args) => {
            let mut section = cfg.corpus.clone().or_defaults();
            if let Some(seed) = args.seed {
                section.seed = seed;
            }
            cfg.corpus = section.clone();
            let corpus = build_corpus(&vocab, section.seed, section.train_per_task, section.eval_per_task);
            let mut file = fs::File::create(&args.out)?;
            corpus
                .export(&mut file)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            write_manifest(&args.out, "gen-corpus", &cfg, section.seed)?;
            println!(
                "wrote {} ({} train samples)",
                args.out.display(),
                corpus.train_sample_count()
            );
        }
        Command::TrainPhase1(args) => {
            if let Some(seed) = args.seed {
                cfg.train.seed = seed;
            }
            let mc = resolve_model_config(&cfg, &vocab)?;
            cfg.model = mc.clone();
            let corpus = obtain_corpus(&vocab, &cfg, &args.corpus)?;
            let mut trainer = Trainer::init(mc, cfg.fem.clone(), cfg.train.clone())?;
            let reports = trainer.phase1_train(&corpus)?;
            trainer.save_checkpoint(&args.out)?;
            if let Some(trace) = &args.trace {
                write_trace_csv(&reports, fs::File::create(trace)?)?;
            }
            write_manifest(&args.out, "train-phase1", &cfg, cfg.train.seed)?;
            let last = reports.last().map(|r| r.l_ce).unwrap_or(f64::NAN);
            println!(
                "phase 1 done: {} steps, final ce {last:.4}, checkpoint {}",
                reports.len(),
                args.out.display()
            );
        }
        Command::TrainPhase2(args) => {
            if let Some(seed) = args.seed {
                cfg.train.seed = seed;
            }
            let (model, fem) = load_ckpt(&args.init)?;
            cfg.model = model.config.clone();
            cfg.fem = fem.config.clone();
            let corpus = obtain_corpus(&vocab, &cfg, &args.corpus)?;
            let mut trainer = Trainer::new(model, fem, cfg.train.clone())?;
            let reports = trainer.phase2_train(&corpus)?;
            trainer.save_checkpoint(&args.out)?;
            if let Some(trace) = &args.trace {
                write_trace_csv(&reports, fs::File::create(trace)?)?;
            }
            write_manifest(&args.out, "train-phase2", &cfg, cfg.train.seed)?;
            let last = reports.last();
            println!(
                "phase 2 done: {} steps, final ce {:.4}, mean rho {:.3}, checkpoint {}",
                reports.len(),
                last.map(|r| r.l_ce).unwrap_or(f64::NAN),
                last.map(|r| r.rho).unwrap_or(f64::NAN),
                args.out.display()
            );
        }
        Command::EvalSweep(args) => {
            let (model, fem) = load_ckpt(&args.checkpoint)?;
            let corpus = obtain_corpus(&vocab, &cfg, &args.corpus)?;
            let mut sweep_cfg = cfg.eval.clone();
            if let Some(tasks) = &args.tasks {
                sweep_cfg.tasks = match tasks.as_str() {
                    "train" => TaskFilter::Train,
                    "held_out" | "held-out" => TaskFilter::HeldOut,
                    "all" => TaskFilter::All,
                    other => {
                        return Err(CliError::Config(format!("unknown task filter `{other}`")))
                    }
                };
            }
            if args.no_fem {
                sweep_cfg.use_fem = false;
            }
            if let Some(seed) = args.seed {
                sweep_cfg.seed = seed;
            }
            cfg.eval = sweep_cfg.clone();
            let rows = run_sweep(&model, &fem, &vocab, &corpus, &sweep_cfg)?;
            write_sweep_csv(&rows, fs::File::create(&args.out)?)?;
            write_manifest(&args.out, "eval-sweep", &cfg, sweep_cfg.seed)?;
            println!("wrote {} ({} rows)", args.out.display(), rows.len());
        }
        Command::Ablate(args) => {
            let axis = match args.axis.as_str() {
                "m" | "M" => "m",
                "b" | "B" => "b",
                other => return Err(CliError::Config(format!("unknown axis `{other}`"))),
            };
            let values: Vec<usize> = args
                .values
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad axis value `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            if values.is_empty() {
                return Err(CliError::Config("no ablation values".into()));
            }
            let ckpts: Vec<&str> = args.checkpoints.split(',').collect();
            let corpus = obtain_corpus(&vocab, &cfg, &args.corpus)?;
            let mut sweep_cfg = cfg.eval.clone();
            sweep_cfg.tasks = TaskFilter::HeldOut;
            let mut rows = Vec::new();
            for (i, &value) in values.iter().enumerate() {
                let ckpt = ckpts.get(i).map(|s| s.trim()).filter(|s| !s.is_empty() && *s != "-");
                let mut point_cfg = resolve_model_config(&cfg, &vocab)?;
                if axis == "m" {
                    point_cfg.experts = value;
                }
                let sweep = match ckpt {
                    Some(path) => {
                        let (model, fem) = load_ckpt(Path::new(path))?;
                        let found = match axis {
                            "m" => model.config.experts,
                            _ => fem.config.extractors,
                        };
                        if found != value {
                            return Err(CliError::Config(format!(
                                "checkpoint {path} has {axis}={found}, expected {value}"
                            )));
                        }
                        Some(run_sweep(&model, &fem, &vocab, &corpus, &sweep_cfg)?)
                    }
                    None => None,
                };
                rows.extend(ablation_rows(
                    if axis == "m" { "m" } else { "b" },
                    value,
                    &point_cfg,
                    sweep.as_deref(),
                    &sweep_cfg.snr_grid_db,
                ));
            }
            write_ablation_csv(&rows, fs::File::create(&args.out)?)?;
            write_manifest(&args.out, "ablate", &cfg, sweep_cfg.seed)?;
            println!("wrote {} ({} rows)", args.out.display(), rows.len());
        }
        Command::Table1(args) => {
            let mc = resolve_model_config(&cfg, &vocab)?;
            let rows = table1_rows(&[
                ("moe-sc".into(), published_base_config(10)),
                ("dense-sc".into(), published_base_config(1)),
                ("desk-model".into(), mc),
            ]);
            write_table1_csv(&rows, fs::File::create(&args.out)?)?;
            write_manifest(&args.out, "table1", &cfg, 0)?;
            println!("wrote {}", args.out.display());
        }
        Command::BaselineEval(args) => {
            let (model, fem) = load_ckpt(&args.checkpoint)?;
            let corpus = obtain_corpus(&vocab, &cfg, &args.corpus)?;
            let mut sweep_cfg = cfg.eval.clone();
            if let Some(seed) = args.seed {
                sweep_cfg.seed = seed;
            }
            cfg.eval = sweep_cfg.clone();
            let rows = run_baseline_eval(
                &model,
                &fem,
                &vocab,
                &corpus,
                &sweep_cfg,
                &CodecConfig::default(),
            )?;
            write_baseline_csv(&rows, fs::File::create(&args.out)?)?;
            write_manifest(&args.out, "baseline-eval", &cfg, sweep_cfg.seed)?;
            println!("wrote {} ({} rows)", args.out.display(), rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Integrity(_) => ExitCode::from(3),
                CliError::Runtime(_) => ExitCode::FAILURE,
            }
        }
    }
}
