//! Command-line front end. `nmt <tool>` and the `nmt-<tool>` aliases share
//! one argument definition per tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use nmtkit::checkpoint::{extract_weights, Checkpoint};
use nmtkit::config::ExperimentConfig;
use nmtkit::data::{build_vocab, read_lines, sequential_batches, ParallelCorpus, Vocabulary};
use nmtkit::decode::{alignment_record, nbest_entries, rescore_nbest, translate_parallel, BeamConfig, NBestEntry};
use nmtkit::metrics::{bleu_corpus, perplexity, BleuVariant, MetricName};
use nmtkit::model::{Model, ModelType};
use nmtkit::subword::{bpe_learn, BpeModel, FilterChain};
use nmtkit::trainer::Trainer;
use nmtkit::Error;

/// Scalar type used by every tool.
type F = f32;

/// Environment variable holding the default worker count.
pub const JOBS_ENV: &str = "NMTKIT_JOBS";

pub const TOOLS: [&str; 8] = [
    "train",
    "translate",
    "rescore",
    "build-dict",
    "extract",
    "test-lm",
    "bpe-learn",
    "bpe-apply",
];

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: 2, msg: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

/// Train a model from a configuration file.
#[derive(Parser, Debug)]
#[command(name = "nmt-train")]
pub struct TrainArgs {
    /// Experiment configuration file.
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
    /// Continue from a snapshot written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Option overrides of the form key:value, applied after the file.
    #[arg(value_name = "KEY:VALUE")]
    pub overrides: Vec<String>,
}

/// Translate a source file with one model or an ensemble.
#[derive(Parser, Debug)]
#[command(name = "nmt-translate")]
pub struct TranslateArgs {
    /// Model checkpoints; more than one decodes with the ensemble.
    #[arg(short = 'm', long = "models", num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Source file, one sentence per line.
    #[arg(short = 'S', long = "source")]
    pub source: PathBuf,
    /// Reference file; enables metric computation.
    #[arg(short = 'R', long = "reference")]
    pub reference: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(short = 'o', long = "output")]
    pub output: Option<PathBuf>,
    /// Metrics printed when a reference is given.
    #[arg(short = 'M', long = "metrics", num_args = 1.., default_value = "bleu", value_parser = parse_metric)]
    pub metrics: Vec<MetricName>,
    /// Beam size.
    #[arg(short = 'b', long = "beam-size", default_value_t = 12)]
    pub beam_size: usize,
    /// Write an n-best list with this many entries per sentence.
    #[arg(short = 'N', long = "n-best", default_value_t = 1)]
    pub n_best: usize,
    /// Also write attention weights to <OUTPUT>.align.json.
    #[arg(short = 'e', long = "alignments", requires = "output")]
    pub alignments: bool,
    /// Number of decoding workers.
    #[arg(short = 'j', long = "jobs", env = JOBS_ENV, hide_env_values = true, default_value_t = 1)]
    pub jobs: usize,
    /// Maximum hypothesis length; 3 * source length + 10 when omitted.
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    /// Post-processing filters; defaults to the training configuration's.
    #[arg(short = 'f', long = "filter")]
    pub filter: Option<String>,
}

/// Rescore an n-best list with one model or an ensemble.
#[derive(Parser, Debug)]
#[command(name = "nmt-rescore")]
pub struct RescoreArgs {
    /// Model checkpoints; scores are averaged over the ensemble.
    #[arg(short = 'm', long = "models", num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Source file the n-best list was produced from.
    #[arg(short = 'S', long = "source")]
    pub source: PathBuf,
    /// n-best list ("id ||| hypothesis ||| score" lines).
    #[arg(short = 'n', long = "n-best")]
    pub nbest: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(short = 'o', long = "output")]
    pub output: Option<PathBuf>,
    /// Hypotheses scored per forward pass.
    #[arg(short = 'b', long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
}

/// Build vocabulary files from tokenized corpora.
#[derive(Parser, Debug)]
#[command(name = "nmt-build-dict")]
pub struct BuildDictArgs {
    /// Corpus files, one sentence per line.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Keep only the most frequent N tokens; 0 keeps all.
    #[arg(short = 'n', long = "n-words", default_value_t = 0)]
    pub n_words: usize,
    /// Build a single vocabulary over all inputs.
    #[arg(short = 's', long = "combined")]
    pub combined: bool,
    /// Output directory; defaults to the directory of each input.
    #[arg(short = 'o', long = "output-dir")]
    pub output_dir: Option<PathBuf>,
}

/// Copy selected weights out of a checkpoint or snapshot.
#[derive(Parser, Debug)]
#[command(name = "nmt-extract")]
pub struct ExtractArgs {
    /// Checkpoint or snapshot file.
    #[arg(short = 'm', long = "model")]
    pub model: PathBuf,
    /// Name patterns; `*` and `?` are wildcards, plain text matches substrings.
    #[arg(short = 'p', long = "pattern", num_args = 1.., required_unless_present = "list")]
    pub patterns: Vec<String>,
    /// Output archive.
    #[arg(short = 'o', long = "output", required_unless_present = "list")]
    pub output: Option<PathBuf>,
    /// Print stored array names and shapes instead of extracting.
    #[arg(short = 'l', long = "list")]
    pub list: bool,
}

/// Compute the perplexity of a recurrent language model on a corpus.
#[derive(Parser, Debug)]
#[command(name = "nmt-test-lm")]
pub struct TestLmArgs {
    /// Language model checkpoint.
    #[arg(short = 'm', long = "model")]
    pub model: PathBuf,
    /// Corpus file; standard input when omitted or "-".
    pub input: Option<PathBuf>,
    /// Sentences per forward pass.
    #[arg(short = 'b', long = "batch-size", default_value_t = 64)]
    pub batch_size: usize,
}

/// Learn byte-pair-encoding merges from a corpus.
#[derive(Parser, Debug)]
#[command(name = "nmt-bpe-learn")]
pub struct BpeLearnArgs {
    /// Number of merge operations.
    #[arg(short = 's', long = "symbols", default_value_t = 10000)]
    pub symbols: usize,
    /// Corpus file; standard input when omitted or "-".
    #[arg(short = 'i', long = "input")]
    pub input: Option<PathBuf>,
    /// Codes file; standard output when omitted or "-".
    #[arg(short = 'o', long = "output")]
    pub output: Option<PathBuf>,
}

/// Segment text with learned byte-pair-encoding merges.
#[derive(Parser, Debug)]
#[command(name = "nmt-bpe-apply")]
pub struct BpeApplyArgs {
    /// Codes file produced by bpe-learn.
    #[arg(short = 'c', long = "codes")]
    pub codes: PathBuf,
    /// Input text; standard input when omitted or "-".
    #[arg(short = 'i', long = "input")]
    pub input: Option<PathBuf>,
    /// Output text; standard output when omitted or "-".
    #[arg(short = 'o', long = "output")]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Tool {
    Train(TrainArgs),
    Translate(TranslateArgs),
    Rescore(RescoreArgs),
    BuildDict(BuildDictArgs),
    Extract(ExtractArgs),
    TestLm(TestLmArgs),
    BpeLearn(BpeLearnArgs),
    BpeApply(BpeApplyArgs),
}

/// Sequence-to-sequence training and decoding tools.
#[derive(Parser, Debug)]
#[command(name = "nmt", version)]
pub struct Cli {
    #[command(subcommand)]
    pub tool: Tool,
}

fn parse_metric(s: &str) -> Result<MetricName, String> {
    match MetricName::from_str(s) {
        Ok(MetricName::Perplexity) => Err("px is not a decoding metric; use test-lm or valid_metric".into()),
        Ok(m) => Ok(m),
        Err(e) => Err(e.to_string()),
    }
}

/// Help text of a tool as shown by `--help`; `None` gives the top level.
pub fn help_text(tool: Option<&str>) -> String {
    let mut cmd = match tool {
        None => Cli::command(),
        Some(t) => alias_command(t).expect("known tool"),
    };
    cmd.render_long_help().to_string()
}

fn alias_command(tool: &str) -> Option<clap::Command> {
    Some(match tool {
        "train" => TrainArgs::command(),
        "translate" => TranslateArgs::command(),
        "rescore" => RescoreArgs::command(),
        "build-dict" => BuildDictArgs::command(),
        "extract" => ExtractArgs::command(),
        "test-lm" => TestLmArgs::command(),
        "bpe-learn" => BpeLearnArgs::command(),
        "bpe-apply" => BpeApplyArgs::command(),
        _ => return None,
    })
}

fn parse_tool(tool: Option<&str>, args: Vec<String>) -> Result<Tool, clap::Error> {
    let Some(t) = tool else {
        return Cli::try_parse_from(args).map(|c| c.tool);
    };
    let m = alias_command(t).expect("known tool").try_get_matches_from(args)?;
    Ok(match t {
        "train" => Tool::Train(TrainArgs::from_arg_matches(&m)?),
        "translate" => Tool::Translate(TranslateArgs::from_arg_matches(&m)?),
        "rescore" => Tool::Rescore(RescoreArgs::from_arg_matches(&m)?),
        "build-dict" => Tool::BuildDict(BuildDictArgs::from_arg_matches(&m)?),
        "extract" => Tool::Extract(ExtractArgs::from_arg_matches(&m)?),
        "test-lm" => Tool::TestLm(TestLmArgs::from_arg_matches(&m)?),
        "bpe-learn" => Tool::BpeLearn(BpeLearnArgs::from_arg_matches(&m)?),
        _ => Tool::BpeApply(BpeApplyArgs::from_arg_matches(&m)?),
    })
}

/// Entry point shared by `nmt` (`tool == None`) and the alias binaries.
pub fn main_for(tool: Option<&str>) -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let parsed = match parse_tool(tool, std::env::args().collect()) {
        Ok(t) => t,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(parsed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(tool: Tool) -> Outcome {
    match tool {
        Tool::Train(a) => train(a),
        Tool::Translate(a) => translate(a),
        Tool::Rescore(a) => rescore(a),
        Tool::BuildDict(a) => build_dict(a),
        Tool::Extract(a) => extract(a),
        Tool::TestLm(a) => test_lm(a),
        Tool::BpeLearn(a) => bpe_learn_tool(a),
        Tool::BpeApply(a) => bpe_apply_tool(a),
    }
}

fn is_stdio(p: &Option<PathBuf>) -> bool {
    p.as_deref().is_none_or(|p| p == Path::new("-"))
}

fn io_err(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    }
}

fn open_output(p: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    if is_stdio(p) {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let path = p.as_deref().expect("checked");
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn input_lines(p: &Option<PathBuf>) -> Result<Vec<String>, Failure> {
    if is_stdio(p) {
        let mut text = String::new();
        io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| io_err(Path::new("<stdin>"), e))?;
        return Ok(text.lines().map(str::to_owned).collect());
    }
    Ok(read_lines(p.as_deref().expect("checked"))?)
}

fn write_lines<S: AsRef<str>>(out: &mut dyn Write, lines: &[S], what: &Path) -> Outcome {
    for l in lines {
        writeln!(out, "{}", l.as_ref()).map_err(|e| io_err(what, e))?;
    }
    out.flush().map_err(|e| io_err(what, e))
}

fn train(a: TrainArgs) -> Outcome {
    let cfg = ExperimentConfig::from_file(&a.config, &a.overrides).map_err(|e| match e {
        Error::Io { .. } => Failure::from(e),
        other => Failure::usage(other.to_string()),
    })?;
    if cfg.device_ignored() {
        eprintln!("warning: device_id {} ignored; this build is CPU-only", cfg.training.device_id);
    }
    let mut trainer = Trainer::<F>::from_config(cfg)?;
    if let Some(snap) = &a.resume {
        trainer.restore_snapshot(snap)?;
    }
    let report = trainer.run()?;
    println!("checkpoint name: {}", report.name);
    println!("updates: {} epochs: {}", report.updates, report.epochs);
    match (report.best, report.best_checkpoint) {
        (Some(best), Some(path)) => println!("best {best} ({})", path.display()),
        _ => println!("best: no validation was run"),
    }
    Ok(())
}

/// Models and vocabularies of an ensemble; every member must share both.
struct Ensemble {
    models: Vec<Model<F>>,
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
    config: Option<ExperimentConfig>,
}

impl Ensemble {
    fn load(paths: &[PathBuf]) -> Result<Self, Failure> {
        let mut models = Vec::new();
        let mut vocabs: Option<(Vec<String>, Vec<String>)> = None;
        let mut config = None;
        for p in paths {
            let ckpt = Checkpoint::<F>::load(p)?;
            let model = ckpt.to_model()?;
            let (Some(src), Some(trg)) = (ckpt.header.src_vocab.clone(), ckpt.header.trg_vocab.clone()) else {
                return Err(Error::Checkpoint(format!("{} has no vocabularies", p.display())).into());
            };
            let o = model.options();
            if o.n_words_src != src.len() || o.n_words_trg != trg.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: model expects {}/{} words but stores vocabularies of {}/{}",
                    p.display(),
                    o.n_words_src,
                    o.n_words_trg,
                    src.len(),
                    trg.len()
                ))
                .into());
            }
            match &vocabs {
                None => vocabs = Some((src, trg)),
                Some((s, t)) if *s != src || *t != trg => {
                    return Err(Error::Checkpoint(format!(
                        "{} uses different vocabularies from {}",
                        p.display(),
                        paths[0].display()
                    ))
                    .into())
                }
                Some(_) => {}
            }
            if config.is_none() {
                config = ckpt.header.config.clone();
            }
            models.push(model);
        }
        let (src, trg) = vocabs.expect("at least one model");
        Ok(Self {
            models,
            src_vocab: Vocabulary::from_tokens(src)?,
            trg_vocab: Vocabulary::from_tokens(trg)?,
            config,
        })
    }

    fn nmt(&self) -> Result<Vec<&nmtkit::NmtModel<F>>, Failure> {
        Ok(self.models.iter().map(|m| m.as_nmt()).collect::<nmtkit::Result<_>>()?)
    }
}

fn translate(a: TranslateArgs) -> Outcome {
    if a.beam_size == 0 || a.n_best == 0 || a.n_best > a.beam_size {
        return Err(Failure::usage("need 1 <= n-best <= beam-size"));
    }
    let ens = Ensemble::load(&a.models)?;
    let models = ens.nmt()?;
    let filters = match (&a.filter, &ens.config) {
        (Some(f), _) => FilterChain::from_str(f).map_err(|e| Failure::usage(e.to_string()))?,
        (None, Some(c)) => c.filters()?,
        (None, None) => FilterChain::default(),
    };
    let src_lines = read_lines(&a.source)?;
    let sources: Vec<Vec<usize>> = src_lines.iter().map(|l| ens.src_vocab.encode(l)).collect();
    let cfg = BeamConfig {
        beam_size: a.beam_size,
        n_best: a.n_best,
        max_len: a.max_len,
        keep_alignments: a.alignments,
    };
    let results = translate_parallel(&models, &sources, a.jobs, &cfg)?;
    let best: Vec<String> = results
        .iter()
        .map(|h| filters.apply(&ens.trg_vocab.decode(&h[0].tokens)))
        .collect();
    let out_name = a.output.clone().unwrap_or_else(|| "<stdout>".into());
    let mut out = open_output(&a.output)?;
    if a.n_best > 1 {
        let lines: Vec<String> = results
            .iter()
            .enumerate()
            .flat_map(|(i, h)| nbest_entries(i, h, &ens.trg_vocab))
            .map(|e| e.to_line())
            .collect();
        write_lines(&mut *out, &lines, &out_name)?;
    } else {
        write_lines(&mut *out, &best, &out_name)?;
    }
    drop(out);
    if a.alignments {
        let records: Vec<_> = results
            .iter()
            .enumerate()
            .map(|(i, h)| alignment_record(i, &sources[i], &h[0], &ens.src_vocab, &ens.trg_vocab))
            .collect();
        let mut path = a.output.clone().expect("required by -e").into_os_string();
        path.push(".align.json");
        let path = PathBuf::from(path);
        let text = serde_json::to_string(&records).map_err(Error::from)?;
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    if let Some(r) = &a.reference {
        let refs = read_lines(r)?;
        for m in &a.metrics {
            let variant = if *m == MetricName::BleuV13a {
                BleuVariant::V13a
            } else {
                BleuVariant::MultiBleu
            };
            println!("{}", bleu_corpus(&best, &refs, variant, false)?);
        }
    }
    Ok(())
}

fn rescore(a: RescoreArgs) -> Outcome {
    let ens = Ensemble::load(&a.models)?;
    let models = ens.nmt()?;
    let sources: Vec<Vec<usize>> = read_lines(&a.source)?.iter().map(|l| ens.src_vocab.encode(l)).collect();
    let origin = a.nbest.display().to_string();
    let entries = read_lines(&a.nbest)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| NBestEntry::parse(l, &origin, i + 1))
        .collect::<nmtkit::Result<Vec<_>>>()?;
    let scored = rescore_nbest(&models, &sources, &entries, &ens.trg_vocab, a.batch_size)?;
    let lines: Vec<String> = scored.iter().map(NBestEntry::to_line).collect();
    let name = a.output.clone().unwrap_or_else(|| "<stdout>".into());
    write_lines(&mut *open_output(&a.output)?, &lines, &name)
}

fn build_dict(a: BuildDictArgs) -> Outcome {
    let vocabs = build_vocab(&a.inputs, a.n_words, a.combined)?;
    let dir_of = |p: &Path| {
        a.output_dir
            .clone()
            .unwrap_or_else(|| p.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let file_name = |p: &Path| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let targets: Vec<PathBuf> = if a.combined {
        let joined: Vec<String> = a.inputs.iter().map(|p| file_name(p)).collect();
        vec![dir_of(&a.inputs[0]).join(format!("{}.vocab.json", joined.join("+")))]
    } else {
        a.inputs
            .iter()
            .map(|p| dir_of(p).join(format!("{}.vocab.json", file_name(p))))
            .collect()
    };
    for (v, path) in vocabs.iter().zip(&targets) {
        v.save(path)?;
        println!("{} ({} tokens)", path.display(), v.len());
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> Outcome {
    let ckpt = Checkpoint::<F>::load(&a.model)?;
    if a.list {
        for e in &ckpt.header.arrays {
            println!("{} {:?}", e.name, e.shape);
        }
        return Ok(());
    }
    let sub = extract_weights(&ckpt, &a.patterns)?;
    let out = a.output.as_deref().expect("required unless listing");
    sub.save(out)?;
    for e in &sub.header.arrays {
        println!("{} {:?}", e.name, e.shape);
    }
    Ok(())
}

fn test_lm(a: TestLmArgs) -> Outcome {
    let ckpt = Checkpoint::<F>::load(&a.model)?;
    let model = ckpt.to_model()?;
    if model.kind() != ModelType::Rnnlm {
        return Err(Error::Checkpoint(format!("{} is not a language model", a.model.display())).into());
    }
    let (_, Some(vocab)) = ckpt.vocabularies()? else {
        return Err(Error::Checkpoint("language model stores no vocabulary".into()).into());
    };
    let lines = input_lines(&a.input)?;
    let corpus = ParallelCorpus::monolingual(&lines, &vocab);
    let mut nll = 0.0;
    let mut tokens = 0;
    for b in sequential_batches::<F>(&corpus, a.batch_size)? {
        nll += model.sentence_nll(&b)?.iter().sum::<f64>();
        tokens += b.unpadded_trg_lens().iter().sum::<usize>();
    }
    println!("{}", perplexity(nll, tokens)?);
    Ok(())
}

fn bpe_learn_tool(a: BpeLearnArgs) -> Outcome {
    let corpus = input_lines(&a.input)?;
    let model = bpe_learn(&corpus, a.symbols)?;
    let name = a.output.clone().unwrap_or_else(|| "<stdout>".into());
    let mut out = open_output(&a.output)?;
    out.write_all(model.to_codes().as_bytes()).map_err(|e| io_err(&name, e))?;
    out.flush().map_err(|e| io_err(&name, e))
}

fn bpe_apply_tool(a: BpeApplyArgs) -> Outcome {
    let model = BpeModel::load(&a.codes)?;
    let name = a.output.clone().unwrap_or_else(|| "<stdout>".into());
    let mut out = open_output(&a.output)?;
    let reader: Box<dyn BufRead> = if is_stdio(&a.input) {
        Box::new(io::stdin().lock())
    } else {
        let p = a.input.as_deref().expect("checked");
        Box::new(BufReader::new(File::open(p).map_err(|e| io_err(p, e))?))
    };
    for line in reader.lines() {
        let line = line.map_err(|e| io_err(Path::new("<input>"), e))?;
        writeln!(out, "{}", model.apply(&line)).map_err(|e| io_err(&name, e))?;
    }
    out.flush().map_err(|e| io_err(&name, e))
}
