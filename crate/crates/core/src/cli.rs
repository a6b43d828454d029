//! Command-line interface: `train`, `eval`, `parse`, `embed`, `gradcheck`.
//!
//! Standard output carries only machine-readable records (JSON lines or
//! bracketed trees); diagnostics go to standard error. Every flag can also be
//! set through an `SSAE_`-prefixed environment variable.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 5 correlation undefined (constant predictions), 6 gradient check
//! failure.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autograd::OpKind;
use crate::data::{load_checkpoint, load_pairs, read_corpus, Checkpoint, Tokenizer};
use crate::error::{Error, Result};
use crate::evaluation::{self, append_result, eval_pairs, EncodeOptions, ResultRow};
use crate::model::{MergeScore, ModelConfig, ModelParams, Objective};
use crate::objectives::{gradcheck_objective, CeNormalization};
use crate::structure;
use crate::trainer::{train, TrainConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_UNDEFINED: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Numeric(_) => EXIT_NUMERIC,
        Error::Undefined(_) => EXIT_UNDEFINED,
        Error::Vocabulary { .. }
        | Error::Shape { .. }
        | Error::Input(_)
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::Evaluation(_)
        | Error::Io { .. } => EXIT_DATA,
        Error::Autograd(_) => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "self-strae", version, about = "Self-structuring autoencoder: train, evaluate, parse, embed")]
pub struct Cli {
    /// Log level for diagnostics on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "SSAE_LOG", default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Zero-shot evaluation on a pair dataset.
    Eval(EvalArgs),
    /// Print the induced tree of every input line.
    Parse(TextArgs),
    /// Print the root embedding of every input line as JSON.
    Embed(TextArgs),
    /// Finite-difference check of every objective's gradient.
    Gradcheck(GradcheckArgs),
}

/// Channel layouts of the channel-count sweep, all with E = 256.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[value(name = "k8-u32")]
    K8U32,
    #[value(name = "k32-u8")]
    K32U8,
    #[value(name = "k64-u4")]
    K64U4,
    #[value(name = "k128-u2")]
    K128U2,
    #[value(name = "k256-u1")]
    K256U1,
}

impl Preset {
    pub fn channels(self) -> (usize, usize) {
        match self {
            Preset::K8U32 => (8, 32),
            Preset::K32U8 => (32, 8),
            Preset::K64U4 => (64, 4),
            Preset::K128U2 => (128, 2),
            Preset::K256U1 => (256, 1),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TokenizerArgs {
    /// Vocabulary file, one token per line.
    #[arg(long, env = "SSAE_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// BPE merges file, one `left right` pair per line.
    #[arg(long, env = "SSAE_MERGES")]
    pub merges: Option<PathBuf>,
    /// Keep case instead of lowercasing before BPE.
    #[arg(long, env = "SSAE_NO_LOWERCASE")]
    pub no_lowercase: bool,
}

impl TokenizerArgs {
    fn load(&self) -> Result<Tokenizer> {
        let vocab = self.vocab.as_ref().ok_or_else(|| Error::Config("--vocab is required".into()))?;
        let merges = self.merges.as_ref().ok_or_else(|| Error::Config("--merges is required".into()))?;
        Ok(Tokenizer::load(vocab, merges)?.with_lowercase(!self.no_lowercase))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training corpus, one sentence per line.
    #[arg(long, env = "SSAE_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// TOML file with training settings; flags take precedence over it.
    #[arg(long, env = "SSAE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Channel layout preset.
    #[arg(long, env = "SSAE_PRESET")]
    pub preset: Option<Preset>,
    /// Reset E, batch size, learning rate, epochs and temperature to the reference values.
    #[arg(long, env = "SSAE_PAPER_DEFAULTS")]
    pub paper_defaults: bool,
    /// Number of channels.
    #[arg(long, env = "SSAE_K")]
    pub k: Option<usize>,
    /// Channel width.
    #[arg(long, env = "SSAE_U")]
    pub u: Option<usize>,
    /// Embedding size; must equal k * u.
    #[arg(long, env = "SSAE_DIM")]
    pub dim: Option<usize>,
    #[arg(long, env = "SSAE_OBJECTIVE")]
    pub objective: Option<Objective>,
    #[arg(long, env = "SSAE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "SSAE_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "SSAE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "SSAE_LR")]
    pub lr: Option<f64>,
    /// Contrastive temperature.
    #[arg(long, env = "SSAE_TAU")]
    pub tau: Option<f64>,
    /// Skip sentences with more tokens than this.
    #[arg(long, env = "SSAE_MAX_LEN")]
    pub max_len: Option<usize>,
    /// Leaf dropout for the strcse objective.
    #[arg(long, env = "SSAE_DROPOUT")]
    pub dropout: Option<f64>,
    /// Dembed with the transposed embedding table.
    #[arg(long, env = "SSAE_TIED")]
    pub tied: bool,
    /// Score merges by the mean per-channel cosine instead of the flattened cosine.
    #[arg(long, env = "SSAE_CHANNEL_MEAN_SCORE")]
    pub channel_mean_score: bool,
    /// Average cross-entropy per sentence first instead of per token.
    #[arg(long, env = "SSAE_SENTENCE_CE")]
    pub sentence_ce: bool,
    /// Clip the global gradient norm.
    #[arg(long, env = "SSAE_CLIP_NORM")]
    pub clip_norm: Option<f64>,
    #[arg(long, env = "SSAE_WORKERS")]
    pub workers: Option<usize>,
    /// Directory for per-epoch and final checkpoints.
    #[arg(long, env = "SSAE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Metrics CSV path (default: <out-dir>/metrics.csv).
    #[arg(long, env = "SSAE_METRICS")]
    pub metrics: Option<PathBuf>,
    /// Pair datasets scored after every epoch.
    #[arg(long = "eval-pairs", env = "SSAE_EVAL_PAIRS", value_delimiter = ',')]
    pub eval_pairs: Vec<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl TrainArgs {
    /// Defaults, then the config file, then presets, then explicit flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if self.paper_defaults {
            let d = TrainConfig::default();
            cfg.dim = d.dim;
            cfg.batch_size = d.batch_size;
            cfg.lr = d.lr;
            cfg.epochs = d.epochs;
            cfg.tau = d.tau;
        }
        if let Some(p) = self.preset {
            let (k, u) = p.channels();
            cfg.channels = k;
            cfg.channel_width = u;
            cfg.dim = k * u;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() { cfg.$field = v; }
            )*};
        }
        set!(k => channels, u => channel_width, dim => dim, objective => objective, seed => seed,
             epochs => epochs, batch_size => batch_size, lr => lr, tau => tau, max_len => max_len,
             dropout => dropout_p, workers => workers);
        if self.clip_norm.is_some() {
            cfg.clip_norm = self.clip_norm;
        }
        if self.tied {
            cfg.tied = true;
        }
        if self.channel_mean_score {
            cfg.merge_score = MergeScore::ChannelMean;
        }
        if self.sentence_ce {
            cfg.ce_normalization = CeNormalization::Sentence;
        }
        // Setting k and u alone implies E.
        if self.dim.is_none() && (self.k.is_some() || self.u.is_some()) {
            cfg.dim = cfg.channels * cfg.channel_width;
        }
        if let Some(dir) = &self.out_dir {
            cfg.checkpoint_dir = Some(dir.clone());
        }
        cfg.metrics_path = self
            .metrics
            .clone()
            .or_else(|| cfg.metrics_path.clone())
            .or_else(|| cfg.checkpoint_dir.as_ref().map(|d| d.join("metrics.csv")));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Spearman correlation of cosine predictions with gold scores.
    Spearman,
    /// Uniformity and alignment of node embeddings.
    Ua,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, env = "SSAE_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Tab-separated pairs: text_a, text_b, score.
    #[arg(long, env = "SSAE_PAIRS")]
    pub pairs: PathBuf,
    #[arg(long, value_enum, env = "SSAE_METRIC", default_value = "spearman")]
    pub metric: Metric,
    /// Append the score to this CSV (dataset, objective, k, u, seed, score).
    #[arg(long, env = "SSAE_RESULTS")]
    pub results: Option<PathBuf>,
    /// Use embedding rows directly for single-token texts.
    #[arg(long, env = "SSAE_RAW_SINGLE_TOKEN")]
    pub raw_single_token: bool,
    /// Nodes sampled for the uniformity/alignment metric.
    #[arg(long, env = "SSAE_UA_SAMPLE", default_value_t = evaluation::DEFAULT_UA_SAMPLE)]
    pub ua_sample: usize,
    /// Seed for the uniformity/alignment sample.
    #[arg(long, env = "SSAE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "SSAE_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TextArgs {
    #[arg(long, env = "SSAE_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Text file, one input per line.
    #[arg(long, env = "SSAE_INPUT")]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Check a single objective.
    #[arg(long, env = "SSAE_OBJECTIVE")]
    pub objective: Option<Objective>,
    #[arg(long, env = "SSAE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Random configurations per objective.
    #[arg(long, env = "SSAE_CONFIGS", default_value_t = 20)]
    pub configs: usize,
    #[arg(long, env = "SSAE_TOL", default_value_t = 1e-5)]
    pub tol: f64,
    /// Negate the adjoint of one op kind, to confirm the check catches it.
    #[arg(long, env = "SSAE_INJECT_FAULT")]
    pub inject_fault: Option<OpKind>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(&cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command, writing records to `out`.
pub fn execute(command: &Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Parse(a) => cmd_text(a, out, TextMode::Parse),
        Command::Embed(a) => cmd_text(a, out, TextMode::Embed),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.resolve()?;
    if args.print_config {
        emit(out, &json(&cfg))?;
        return Ok(0);
    }
    let corpus_path = args.corpus.as_ref().ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let tokenizer = args.tokenizer.load()?;
    let corpus = read_corpus(corpus_path, &tokenizer, cfg.max_len)?;
    log::info!(
        "corpus: {} sentences kept, {} tokens ({} too short, {} too long)",
        corpus.stats.kept,
        corpus.stats.tokens,
        corpus.stats.too_short,
        corpus.stats.too_long
    );
    let eval_sets = args.eval_pairs.iter().map(load_pairs).collect::<Result<Vec<_>>>()?;
    let enc = EncodeOptions {
        merge_score: cfg.merge_score,
        raw_single_token: false,
    };
    let mut hook = |params: &ModelParams, _: &ModelConfig| -> Result<Vec<(String, f64)>> {
        eval_sets
            .iter()
            .map(|d| {
                // A degenerate model can make predictions constant; log it as NaN.
                let score = match eval_pairs(params, &tokenizer, d, enc, cfg.workers) {
                    Ok(r) => r.spearman_x100,
                    Err(Error::Undefined(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
                Ok((d.name.clone(), score))
            })
            .collect()
    };
    let outcome = train(
        &cfg,
        tokenizer.vocab().len(),
        &tokenizer.vocab().fingerprint(),
        &corpus.sentences,
        (!eval_sets.is_empty()).then_some(&mut hook as &mut _),
    )?;
    for m in &outcome.metrics {
        emit(out, &json(m))?;
    }
    Ok(0)
}

fn load_model(path: &Path, tokenizer: &Tokenizer) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let fp = tokenizer.vocab().fingerprint();
    if ckpt.meta.vocab_fingerprint != fp {
        return Err(Error::Input(format!(
            "{} was trained with a different vocabulary (fingerprint {} vs {})",
            path.display(),
            ckpt.meta.vocab_fingerprint,
            fp
        )));
    }
    Ok(ckpt)
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let tokenizer = args.tokenizer.load()?;
    let ckpt = load_model(&args.checkpoint, &tokenizer)?;
    let data = load_pairs(&args.pairs)?;
    let cfg = ckpt.config();
    let score = match args.metric {
        Metric::Spearman => {
            let opts = EncodeOptions {
                merge_score: cfg.merge_score,
                raw_single_token: args.raw_single_token,
            };
            let report = eval_pairs(&ckpt.params, &tokenizer, &data, opts, args.workers)?;
            emit(out, &json(&report))?;
            report.spearman_x100
        }
        Metric::Ua => {
            let sentences: Vec<Vec<usize>> = data
                .rows
                .iter()
                .flat_map(|r| [tokenizer.tokenize(&r.text_a), tokenizer.tokenize(&r.text_b)])
                .filter(|s| !s.is_empty())
                .collect();
            let report =
                evaluation::ua_report(&ckpt.params, cfg, &data.name, &sentences, args.ua_sample, args.seed)?;
            emit(out, &json(&report))?;
            report.alignment
        }
    };
    if let Some(path) = &args.results {
        let dataset = match args.metric {
            Metric::Spearman => data.name.clone(),
            Metric::Ua => format!("{}:alignment", data.name),
        };
        append_result(
            path,
            &ResultRow {
                dataset,
                objective: cfg.objective,
                k: cfg.channels,
                u: cfg.channel_width,
                seed: ckpt.meta.seed,
                score,
            },
        )?;
    }
    Ok(0)
}

#[derive(Clone, Copy)]
enum TextMode {
    Parse,
    Embed,
}

fn cmd_text(args: &TextArgs, out: &mut dyn Write, mode: TextMode) -> Result<i32> {
    let tokenizer = args.tokenizer.load()?;
    let ckpt = load_model(&args.checkpoint, &tokenizer)?;
    let file = std::fs::File::open(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let mut blank = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&args.input, e))?;
        let ids = tokenizer.tokenize(&line);
        if ids.is_empty() {
            blank += 1;
            continue;
        }
        let enc = structure::induce_with(&ckpt.params, &ids, ckpt.config().merge_score)?;
        match mode {
            TextMode::Parse => {
                let words: Vec<String> = ids.iter().map(|&id| tokenizer.display(id)).collect();
                emit(out, &structure::to_bracket(&enc.tree, &words)?)?;
            }
            TextMode::Embed => {
                let record = serde_json::json!({
                    "line": i + 1,
                    "text": line,
                    "vector": enc.root_up().flat(),
                });
                emit(out, &record.to_string())?;
            }
        }
    }
    if blank > 0 {
        log::warn!("skipped {blank} blank line(s)");
    }
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let objectives: Vec<Objective> = match args.objective {
        Some(o) => vec![o],
        None => Objective::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for objective in objectives {
        let check = gradcheck_objective(objective, args.seed, args.configs, args.tol, args.inject_fault)?;
        emit(out, &json(&check))?;
        if !check.passed {
            failed.push(objective.to_string());
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}
