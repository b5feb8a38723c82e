//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on usage errors, 2 on runtime failures.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::eval::{self, Corrector, EvalOptions, Verdict};
use crate::ids::{SymbolId, SymbolVocabulary};
use crate::model::CdfModel;
use crate::synth::{Corpus, GlyphImage, Split};
use crate::train;

#[derive(Debug, Parser)]
#[command(
    name = "cdf",
    version,
    about = "Count-decode-fetch character error correction on a synthetic glyph language",
    after_help = "Any configuration value can be overridden with --section.key=value, e.g. --train.epochs=5."
)]
struct Cli {
    /// TOML run configuration with [corpus], [model], [train] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for corpus generation, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus directory.
    GenCorpus {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus; writes history, validation log and best checkpoint.
    Train {
        /// Corpus directory (dictionary, vocabulary and splits).
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory for history.csv, validation.csv and best.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus split and print a JSON report.
    Eval {
        /// Corpus directory (dictionary, vocabulary and splits).
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        infer: InferArgs,
    },
    /// Decompose one PGM image and check it against the dictionary.
    Decompose {
        /// Grayscale PGM image.
        image: PathBuf,
        /// Corpus directory (dictionary, vocabulary and splits).
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        infer: InferArgs,
    },
    /// Assess one PGM image and list correction candidates.
    Correct {
        /// Grayscale PGM image.
        image: PathBuf,
        /// Corpus directory (dictionary, vocabulary and splits).
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        infer: InferArgs,
    },
    /// Write decoder attention and counter energy maps of one image.
    InspectAttention {
        /// Grayscale PGM image.
        image: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the PGM maps.
        #[arg(long)]
        out: PathBuf,
        /// Plain argmax decoding.
        #[arg(long)]
        no_reweight: bool,
    },
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Number of correction candidates.
    #[arg(long)]
    topk: Option<usize>,
    /// Plain argmax decoding.
    #[arg(long)]
    no_reweight: bool,
    /// Decode without the counting vector.
    #[arg(long)]
    no_countvec: bool,
    /// Correction method: fetcher, edit or prob_embed.
    #[arg(long)]
    baseline: Option<Corrector>,
}

impl InferArgs {
    fn apply(&self, mut o: EvalOptions) -> EvalOptions {
        if let Some(k) = self.topk {
            o.topk = k;
        }
        o.reweight &= !self.no_reweight;
        o.count_vector &= !self.no_countvec;
        if let Some(c) = self.baseline {
            o.corrector = c;
        }
        o
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Splits `--section.key=value` overrides from the remaining arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override =
            a.strip_prefix("--").and_then(|s| s.split_once('=')).is_some_and(|(k, _)| k.contains('.') && !k.contains('/'));
        if is_override {
            overrides.push(a);
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

/// Runs the CLI on `args` (including the program name), writing normal
/// output to `out` and diagnostics to `err`.
pub fn run(args: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    match execute(cli, &overrides, out, err) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
    }
}

fn load_config(cli: &Cli, overrides: &[String]) -> Result<RunConfig, Failure> {
    if let Some(p) = &cli.config {
        exists(p, "config")?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), overrides).map_err(|e| match e {
        crate::config::ConfigError::File { .. } => Failure::Runtime(e.to_string()),
        _ => Failure::Usage(e.to_string()),
    })?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
        cfg.resolve_seed();
    }
    Ok(cfg)
}

/// A missing input is a usage error; one that exists but cannot be read is
/// a runtime failure.
fn exists(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    exists(dir, "corpus")?;
    Corpus::load(dir).map_err(|e| Failure::Runtime(format!("corpus {}: {e}", dir.display())))
}

fn load_model(path: &Path) -> Result<(CdfModel<f32>, SymbolVocabulary), Failure> {
    exists(path, "checkpoint")?;
    let file = std::fs::File::open(path).map_err(|e| Failure::Runtime(format!("checkpoint {}: {e}", path.display())))?;
    eval::load_checkpoint(BufReader::new(file)).map_err(|e| Failure::Runtime(format!("checkpoint {}: {e}", path.display())))
}

fn check_compatible(model: &CdfModel<f32>, vocab: &SymbolVocabulary, corpus: &Corpus) -> Result<(), Failure> {
    eval::check_compatible(model, vocab, corpus).map_err(runtime)
}

fn load_image(path: &Path, size: usize) -> Result<Vec<f32>, Failure> {
    exists(path, "image")?;
    let file = std::fs::File::open(path).map_err(|e| Failure::Runtime(format!("image {}: {e}", path.display())))?;
    let img = GlyphImage::read_pgm(BufReader::new(file)).map_err(|e| Failure::Runtime(format!("image {}: {e}", path.display())))?;
    if img.size != size {
        return Err(Failure::Runtime(format!("image {} is {}px, model expects {size}px", path.display(), img.size)));
    }
    Ok(img.intensities())
}

fn names(vocab: &SymbolVocabulary, ids: &[SymbolId]) -> String {
    ids.iter().map(|&i| vocab.name(i)).collect::<Vec<_>>().join(" ")
}

fn execute(cli: Cli, overrides: &[String], out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        // A pool may already exist when the CLI is driven in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(&cli, overrides)?;
    match &cli.command {
        Command::GenCorpus { out: dir } => {
            let corpus = Corpus::generate(&cfg.corpus).map_err(|e| Failure::Usage(e.to_string()))?;
            corpus.write(dir).map_err(runtime)?;
            writeln!(
                out,
                "wrote {} samples ({} symbols, {} classes) to {}",
                corpus.records.len(),
                corpus.n_symbols(),
                corpus.n_classes(),
                dir.display()
            )
            .map_err(runtime)?;
        }
        Command::Train { corpus, out: dir } => {
            let corpus = load_corpus(corpus)?;
            std::fs::create_dir_all(dir).map_err(runtime)?;
            std::fs::write(dir.join("run.toml"), cfg.to_toml()).map_err(runtime)?;
            let mut log = |s: &train::EpochSummary| {
                let val = s.val_dacc.map_or(String::new(), |d| format!(" val DACC {d:.4}"));
                let _ = writeln!(err, "epoch {} loss {:.4}{val} ({:.0}s)", s.epoch, s.mean_loss, s.seconds);
            };
            let report = train::fit(&corpus, cfg.model.clone(), &cfg.train, Some(dir), &mut log).map_err(|e| match e {
                train::TrainError::Config(m) => Failure::Usage(m),
                e => runtime(e),
            })?;
            writeln!(
                out,
                "best epoch {} validation DACC {:.4}; checkpoint {}",
                report.best_epoch,
                report.best_val_dacc.max(0.0),
                dir.join("best.ckpt").display()
            )
            .map_err(runtime)?;
        }
        Command::Eval { corpus, checkpoint, split, out: path, infer } => {
            let corpus = load_corpus(corpus)?;
            let (model, vocab) = load_model(checkpoint)?;
            check_compatible(&model, &vocab, &corpus)?;
            let opts = infer.apply(cfg.eval);
            let report = eval::evaluate(&model, &corpus, *split, &opts).map_err(runtime)?;
            let json = report.to_json();
            if let Some(p) = path {
                std::fs::write(p, &json).map_err(runtime)?;
            }
            writeln!(out, "{json}").map_err(runtime)?;
        }
        Command::Decompose { image, corpus, checkpoint, infer } | Command::Correct { image, corpus, checkpoint, infer } => {
            let corpus = load_corpus(corpus)?;
            let (model, vocab) = load_model(checkpoint)?;
            check_compatible(&model, &vocab, &corpus)?;
            let opts = infer.apply(cfg.eval);
            let pixels = load_image(image, model.config.image_size)?;
            let verdict = eval::assess(&model, &pixels, &vocab, &corpus.dict, &opts).map_err(runtime)?;
            let decomposed = match &verdict {
                Verdict::Right { class } => corpus.dict.sequence(*class).unwrap_or_default().to_vec(),
                Verdict::Misspelled { decomposed, .. } => decomposed.clone(),
            };
            writeln!(out, "{}", names(&vocab, &decomposed)).map_err(runtime)?;
            match &verdict {
                Verdict::Right { class } => writeln!(out, "RIGHT {}", class.0),
                Verdict::Misspelled { unparseable: true, .. } => writeln!(out, "MISSPELLED (not a well-formed IDS)"),
                Verdict::Misspelled { .. } => writeln!(out, "MISSPELLED"),
            }
            .map_err(runtime)?;
            if let (Command::Correct { .. }, Verdict::Misspelled { candidates, .. }) = (&cli.command, &verdict) {
                let label = if opts.corrector == Corrector::Fetcher { "probability" } else { "distance" };
                writeln!(out, "rank\tclass\t{label}\tids").map_err(runtime)?;
                for (r, (c, s)) in candidates.iter().enumerate() {
                    let seq = corpus.dict.sequence(*c).unwrap_or_default();
                    writeln!(out, "{}\t{}\t{s:.6}\t{}", r + 1, c.0, names(&vocab, seq)).map_err(runtime)?;
                }
            }
        }
        Command::InspectAttention { image, checkpoint, out: dir, no_reweight } => {
            let (model, vocab) = load_model(checkpoint)?;
            let pixels = load_image(image, model.config.image_size)?;
            let paths = eval::export_attention(&model, &pixels, &vocab, !no_reweight, dir).map_err(runtime)?;
            writeln!(out, "wrote {} maps to {}", paths.len(), dir.display()).map_err(runtime)?;
        }
    }
    Ok(())
}
