//! Command-line interface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{corpus_stats, read_corpus, read_tokens, split_validation, write_corpus, Corpus};
use crate::decoder::{decode, DecoderConfig};
use crate::embeddings::{
    alphabet, load_contextual, load_word_table, CharVocab, ContextualStore, EmbeddingTable, UnkPolicy,
};
use crate::eval::{aggregate_runs, corpus_triplets, single_ratios, triplet_prf, Metrics};
use crate::net::Tagger;
use crate::scheme::repair_tags;
use crate::train::{evaluate, indices_to_tags, prepare, train, TrainConfig, TrainOutcome};

type Error = Box<dyn std::error::Error>;

#[derive(Debug, Parser)]
#[command(name = "causal-extract", version, about = "Extract cause-effect triplets from tokenized sentences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tagger and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Tag token files with a trained model.
    Tag(TagArgs),
    /// Convert a tagged corpus into triplet lines.
    DecodeTriplets(DecodeArgs),
    /// Compare predicted tags with gold tags at triplet level.
    Eval(EvalArgs),
    /// Count tags in a corpus.
    Stats(StatsArgs),
    /// Train and evaluate several times and report mean ± std.
    Runs(RunsArgs),
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Word vectors, text format with a "count dim" header line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Contextual vectors per sentence (CTXE binary).
    #[arg(long)]
    pub contextual: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tagged training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus; split off the training corpus when absent.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Checkpoint path; the log goes to `<out>.log`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Token file; a tag column, if present, is ignored.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Output corpus; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Tagged corpus.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Drop orphan inside-tags before decoding.
    #[arg(long)]
    pub repair: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Also print the single cause / single effect ratios.
    #[arg(long)]
    pub ratios: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tagged training corpus; validation is split off it.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Tagged test corpus.
    #[arg(long)]
    pub gold: PathBuf,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Seed of the first run; run i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for per-run checkpoints and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path).map(BufReader::new).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_corpus(path: &Path) -> Result<Corpus, Error> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    read_corpus(open(path)?, name).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Error> {
    let mut config = match path {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)
            .map_err(|e| format!("{}: {e}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

struct Sources {
    words: EmbeddingTable,
    context: Option<ContextualStore>,
}

impl Sources {
    fn load(inputs: &Inputs) -> Result<Self, Error> {
        let words = match &inputs.embeddings {
            Some(p) => load_word_table(open(p)?, UnkPolicy::Zeros).map_err(|e| format!("{}: {e}", p.display()))?,
            None => EmbeddingTable::empty(0),
        };
        let context = match &inputs.contextual {
            Some(p) => Some(load_contextual(open(p)?).map_err(|e| format!("{}: {e}", p.display()))?),
            None => None,
        };
        Ok(Sources { words, context })
    }

    fn ctx_dim(&self) -> usize {
        self.context.as_ref().map_or(0, |c| c.dim())
    }
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn fit(
    train_corpus: &Corpus,
    val_corpus: &Corpus,
    sources: &Sources,
    config: &TrainConfig,
    err: &mut dyn Write,
) -> Result<TrainOutcome, Error> {
    let chars = CharVocab::new(alphabet(train_corpus));
    let ctx = sources.context.as_ref();
    let train_set = prepare(train_corpus, &sources.words, &chars, ctx, sources.ctx_dim())?;
    let val_set = prepare(val_corpus, &sources.words, &chars, ctx, sources.ctx_dim())?;
    let tagger = Tagger::new(config.dims(sources.words.dim(), sources.ctx_dim()), chars, config.seed)?;
    let outcome = train(tagger, &train_set, &val_set, config, |r| log::info!("{r}"))?;
    writeln!(err, "best epoch {} validation F1 {:.4}", outcome.best_epoch, outcome.best_f1)?;
    Ok(outcome)
}

fn cmd_train(args: &TrainArgs, err: &mut dyn Write) -> Result<(), Error> {
    let config = load_config(args.config.as_deref(), args.seed)?;
    let corpus = load_corpus(&args.corpus)?;
    let (train_corpus, val_corpus) = match &args.gold {
        Some(p) => (corpus, load_corpus(p)?),
        None => split_validation(&corpus, config.validation_fraction, config.seed)?,
    };
    let sources = Sources::load(&args.inputs)?;
    let outcome = fit(&train_corpus, &val_corpus, &sources, &config, err)?;
    let mut out = create(&args.out)?;
    outcome.tagger.save(&mut out)?;
    out.flush()?;
    std::fs::write(log_path(&args.out), outcome.log_text())?;
    Ok(())
}

fn cmd_tag(args: &TagArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Error> {
    let tagger = Tagger::load(open(&args.model)?).map_err(|e| format!("{}: {e}", args.model.display()))?;
    let sources = Sources::load(&args.inputs)?;
    if sources.words.dim() != tagger.dims.word_dim || sources.ctx_dim() != tagger.dims.ctx_dim {
        return Err(format!(
            "model expects word/contextual dimensions {}/{}, inputs give {}/{}",
            tagger.dims.word_dim,
            tagger.dims.ctx_dim,
            sources.words.dim(),
            sources.ctx_dim()
        )
        .into());
    }
    let name = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let mut corpus = read_tokens(open(&args.input)?, name).map_err(|e| format!("{}: {e}", args.input.display()))?;
    let examples = prepare(&corpus, &sources.words, &tagger.chars, sources.context.as_ref(), tagger.dims.ctx_dim)?;
    let mut repaired = 0;
    for (a, ex) in corpus.sentences.iter_mut().zip(&examples) {
        let raw = indices_to_tags(&tagger.predict(&ex.bundle)?);
        let fixed = repair_tags(&raw);
        if fixed != raw {
            repaired += 1;
        }
        a.tags = fixed;
    }
    if repaired > 0 {
        writeln!(err, "repaired malformed tags in {repaired} sentences")?;
    }
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            write_corpus(&corpus, &mut w)?;
            w.flush()?;
        }
        None => write_corpus(&corpus, &mut *out)?,
    }
    Ok(())
}

fn cmd_decode(args: &DecodeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Error> {
    let corpus = load_corpus(&args.input)?;
    let config = DecoderConfig { repair: args.repair, ..DecoderConfig::default() };
    let mut lines = String::new();
    for a in corpus.iter() {
        match decode(&a.sentence, &a.tags, &config) {
            Ok(d) => {
                for t in &d.triplets {
                    let (cause, effect) = t.texts(&a.sentence);
                    lines.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{cause}\t{effect}\n",
                        a.sentence.id, t.cause.start, t.cause.end, t.effect.start, t.effect.end
                    ));
                }
            }
            Err(e) => writeln!(err, "sentence {}: {e}", a.sentence.id)?,
        }
    }
    match &args.out {
        Some(p) => std::fs::write(p, lines)?,
        None => out.write_all(lines.as_bytes())?,
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Error> {
    let gold = load_corpus(&args.gold)?;
    let pred = load_corpus(&args.pred)?;
    let (gold_map, gold_failed) = corpus_triplets(&gold, &DecoderConfig::default());
    let repair = DecoderConfig { repair: true, ..DecoderConfig::default() };
    let (pred_map, pred_failed) = corpus_triplets(&pred, &repair);
    if !gold_failed.is_empty() || !pred_failed.is_empty() {
        writeln!(err, "undecodable sentences: {} gold, {} predicted", gold_failed.len(), pred_failed.len())?;
    }
    let metrics = triplet_prf(&gold_map, &pred_map)?;
    writeln!(out, "{metrics}")?;
    if args.ratios {
        let r = single_ratios(&gold_map, &pred_map)?;
        writeln!(out, "RS-C {:.4} RS-E {:.4}", r.rs_c, r.rs_e)?;
    }
    Ok(())
}

fn cmd_stats(args: &StatsArgs, out: &mut dyn Write) -> Result<(), Error> {
    let corpus = load_corpus(&args.corpus)?;
    write!(out, "{}", corpus_stats(&corpus))?;
    Ok(())
}

fn cmd_runs(args: &RunsArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Error> {
    if args.runs == 0 {
        return Err("--runs must be at least 1".into());
    }
    let base = load_config(args.config.as_deref(), args.seed)?;
    let corpus = load_corpus(&args.corpus)?;
    let test = load_corpus(&args.gold)?;
    let sources = Sources::load(&args.inputs)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
    }
    let mut results: Vec<Metrics> = Vec::with_capacity(args.runs);
    for i in 0..args.runs {
        let config = TrainConfig { seed: base.seed + i as u64, ..base.clone() };
        let (train_corpus, val_corpus) = split_validation(&corpus, config.validation_fraction, config.seed)?;
        let outcome = fit(&train_corpus, &val_corpus, &sources, &config, err)?;
        let test_set =
            prepare(&test, &sources.words, &outcome.tagger.chars, sources.context.as_ref(), sources.ctx_dim())?;
        let m = evaluate(&outcome.tagger, &test_set)?;
        writeln!(err, "run {} seed {}: {m}", i + 1, config.seed)?;
        if let Some(dir) = &args.out {
            let path = dir.join(format!("run{}.bin", i + 1));
            let mut w = create(&path)?;
            outcome.tagger.save(&mut w)?;
            w.flush()?;
            std::fs::write(log_path(&path), outcome.log_text())?;
        }
        results.push(m);
    }
    let name = args.config.as_ref().and_then(|p| p.file_stem()).and_then(|s| s.to_str()).unwrap_or("model");
    writeln!(out, "{}", aggregate_runs(&results)?.report_row(name))?;
    Ok(())
}

/// Runs the CLI with `args` (program name first) and returns the exit
/// status: 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, err),
        Command::Tag(a) => cmd_tag(a, out, err),
        Command::DecodeTriplets(a) => cmd_decode(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Stats(a) => cmd_stats(a, out),
        Command::Runs(a) => cmd_runs(a, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
