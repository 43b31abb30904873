//! Command-line workbench for measuring per-head bias and perplexity
//! contributions, building pruning plans, and comparing strategies.
//!
//! Exit codes: 0 on success, 1 for computation failures, 2 for usage and
//! input errors (bad flags, missing or malformed input files).

mod artifacts;
mod settings;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fasp::analysis;
use fasp::bias_eval::scorer::{LexiconScorer, RemoteScorer, ToxicityScorer};
use fasp::bias_eval::{evaluate_model_bias, load_prompts, split, GenParams, PromptDataset};
use fasp::hashing::sha256_hex;
use fasp::head_scoring::{
    build_table, score_bias_all, score_bias_all_cached, score_ppl_all, score_ppl_all_cached,
    Cache, HeadScoreTable, ProvenanceHashes,
};
use fasp::model::{generate, perplexity, HeadGateMask, ModelConfig, ModelWeights};
use fasp::pruning::{build_plan, sweep, PlanContext, PruningError, Strategy};
use fasp::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use fasp::weights_io;

use artifacts::{
    corpus_hash, dataset_hash, gen_params_hash, hash_file, read_input, write_json, write_text,
    BiasDocument, DocProvenance, GenerateDocument, PlanDocument, PplDocument, SeedBias,
    SweepDocument,
};
use settings::{defaults, pick, ConfigFile};

/// Environment variable overriding the default cache directory.
const CACHE_DIR_ENV: &str = "FASP_CACHE_DIR";

#[derive(Debug)]
pub struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn compute(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

#[derive(Parser)]
#[command(name = "fasp", version, about = "Fairness-aware attention head pruning workbench")]
struct Cli {
    /// JSON config file with default values for tunable parameters.
    /// Command-line flags take precedence over config entries.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a randomly initialized model container for experiments.
    MakeToy(MakeToyArgs),
    /// Sample a continuation from a model.
    Generate(GenerateArgs),
    /// Perplexity of a model on a text corpus.
    EvalPpl(EvalPplArgs),
    /// Subgroup toxicity disparity of a model on a prompt dataset.
    EvalBias(EvalBiasArgs),
    /// Score every head's perplexity and bias contribution by ablation.
    ScoreHeads(ScoreHeadsArgs),
    /// Build a pruning plan from head scores or model weights.
    Prune(PruneArgs),
    /// Correlate per-head bias contributions across categories.
    Correlate(CorrelateArgs),
    /// Evaluate pruning strategies over a grid of pruning ratios.
    Sweep(SweepArgs),
    /// Emit the full Markdown analysis report.
    Report(ReportArgs),
}

#[derive(Args)]
struct MakeToyArgs {
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    d_head: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    /// Vocabulary size; 259 matches the byte-level tokenizer.
    #[arg(long, default_value_t = 259)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 1e-5)]
    ln_eps: f32,
    /// Weight standard deviation. The default gives near-uniform logits;
    /// 0.2 to 0.5 gives continuations that depend on the prompt.
    #[arg(long, default_value_t = fasp::weights_io::TOY_INIT_STD)]
    init_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prompt text; empty prompts start from the beginning-of-sequence token.
    #[arg(long)]
    prompt: String,
    /// `byte` or a path to a word-level vocabulary JSON.
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    #[arg(long)]
    max_new: Option<usize>,
    /// 0 is greedy decoding; values above 0 sample.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional JSON artifact with tokens, text, and provenance.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    model: PathBuf,
    /// UTF-8 text file scored in non-overlapping windows.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScorerArgs {
    /// Lexicon TSV (word<TAB>weight per line) for the built-in scorer.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Base URL of a remote toxicity scoring service.
    #[arg(long)]
    scorer_url: Option<String>,
    #[arg(long, default_value_t = 5000)]
    scorer_timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    scorer_retries: u32,
    #[arg(long, default_value_t = 16)]
    scorer_batch_size: usize,
}

impl ScorerArgs {
    fn build(&self) -> Result<Box<dyn ToxicityScorer>, CliError> {
        match (&self.lexicon, &self.scorer_url) {
            (Some(path), None) => {
                let scorer = LexiconScorer::from_file(path).map_err(|e| {
                    CliError::usage(format!("invalid lexicon {}: {e}", path.display()))
                })?;
                Ok(Box::new(scorer))
            }
            (None, Some(url)) => {
                let scorer = RemoteScorer::new(
                    url,
                    Duration::from_millis(self.scorer_timeout_ms),
                    self.scorer_retries,
                    self.scorer_batch_size,
                )
                .map_err(|e| CliError::usage(format!("cannot build remote scorer: {e}")))?;
                Ok(Box::new(scorer))
            }
            _ => Err(CliError::usage("exactly one of --lexicon or --scorer-url is required")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    All,
    Validation,
    Test,
}

impl SplitChoice {
    fn name(&self) -> &'static str {
        match self {
            SplitChoice::All => "all",
            SplitChoice::Validation => "validation",
            SplitChoice::Test => "test",
        }
    }
}

#[derive(Args)]
struct EvalBiasArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prompt dataset (JSONL with bias_category, subgroup, text).
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    category: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Which side of the validation/test split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    split: SplitChoice,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreHeadsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Bias categories to score; defaults to every category in the dataset.
    #[arg(long = "category")]
    categories: Vec<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    /// Cache directory; FASP_CACHE_DIR overrides the default `cache`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Recompute everything, neither reading nor writing the cache.
    #[arg(long)]
    no_cache: bool,
    /// Output score table (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV rendering of the table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Head score table from score-heads (required by fasp, fairness_only,
    /// performance_only).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    strategy: String,
    /// Fraction of heads to prune.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Bias category; inferred when the table has exactly one.
    #[arg(long)]
    category: Option<String>,
    /// Corpus, required by the gradient strategy.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    fd_epsilon: Option<f64>,
    #[arg(long)]
    random_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    table: PathBuf,
    /// Output correlation matrix (CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    category: Option<String>,
    /// Strategies to evaluate; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Pruning ratios to evaluate.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    #[arg(long)]
    fd_epsilon: Option<f64>,
    #[arg(long)]
    random_seed: Option<u64>,
    /// Output CSV of all sweep rows.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON rendering of the sweep.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    table: PathBuf,
    /// Fraction of heads counted as "top" per category.
    #[arg(long)]
    top_fraction: Option<f64>,
    /// Sweep JSON (from `sweep --json`) to embed in the report.
    #[arg(long)]
    sweep_json: Option<PathBuf>,
    /// Output Markdown report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overlap_out: Option<PathBuf>,
    #[arg(long)]
    correlation_out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeToy(a) => cmd_make_toy(a),
        Command::Generate(a) => cmd_generate(a, &config),
        Command::EvalPpl(a) => cmd_eval_ppl(a, &config),
        Command::EvalBias(a) => cmd_eval_bias(a, &config),
        Command::ScoreHeads(a) => cmd_score_heads(a, &config),
        Command::Prune(a) => cmd_prune(a, &config),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Sweep(a) => cmd_sweep(a, &config),
        Command::Report(a) => cmd_report(a, &config),
    }
}

// --- shared loaders ---

fn load_model(path: &Path) -> Result<(ModelConfig, ModelWeights, String), CliError> {
    let bytes = read_input(path)?;
    let (cfg, w) = weights_io::load(path)
        .map_err(|e| CliError::usage(format!("invalid model container {}: {e}", path.display())))?;
    Ok((cfg, w, sha256_hex(&bytes)))
}

/// Tokenizer plus a stable tag identifying it in provenance hashes.
fn load_tokenizer(choice: &str) -> Result<(Tokenizer, String), CliError> {
    if choice == "byte" {
        return Ok((Tokenizer::byte_level(), "byte".to_string()));
    }
    let path = Path::new(choice);
    let bytes = read_input(path)?;
    let tok = Tokenizer::word_level_from_file(path)
        .map_err(|e| CliError::usage(format!("invalid tokenizer {}: {e}", path.display())))?;
    Ok((tok, format!("word:{}", sha256_hex(&bytes))))
}

fn load_corpus(
    path: &Path,
    tokenizer: &Tokenizer,
    cfg: &ModelConfig,
    window: usize,
) -> Result<(Vec<u32>, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CliError::usage(format!("corpus {} is not UTF-8: {e}", path.display())))?;
    let tokens = tokenizer.encode(text);
    if tokens.len() < 2 {
        return Err(CliError::usage(format!(
            "corpus {} yields {} tokens; at least 2 are needed",
            path.display(),
            tokens.len()
        )));
    }
    if !(2..=cfg.max_seq_len).contains(&window) {
        return Err(CliError::usage(format!(
            "window {window} must be between 2 and the model's max sequence length {}",
            cfg.max_seq_len
        )));
    }
    Ok((tokens, bytes))
}

fn load_dataset(path: &Path) -> Result<(PromptDataset, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let dataset = load_prompts(path)
        .map_err(|e| CliError::usage(format!("invalid prompt dataset: {e}")))?;
    Ok((dataset, bytes))
}

fn check_category(d: &PromptDataset, category: &str) -> Result<(), CliError> {
    let subgroups = d.subgroups(category).map_err(|_| {
        CliError::usage(format!(
            "category {category:?} is not in the dataset; available: {}",
            d.categories().join(", ")
        ))
    })?;
    if subgroups.len() < 2 {
        return Err(CliError::usage(format!(
            "category {category:?} has {} subgroup(s); at least 2 are needed",
            subgroups.len()
        )));
    }
    Ok(())
}

fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    Strategy::from_str(s).map_err(CliError::usage)
}

/// Map plan construction failures: parameter and input problems are usage
/// errors, model evaluation failures are computation errors.
fn plan_error(e: PruningError) -> CliError {
    match e {
        PruningError::Model(_) | PruningError::Bias(_) => CliError::compute(e.to_string()),
        _ => CliError::usage(e.to_string()),
    }
}

fn gen_params(
    seeds: Option<Vec<u64>>,
    max_new: Option<usize>,
    temperature: Option<f64>,
    config: &ConfigFile,
) -> GenParams {
    GenParams {
        max_new: pick(max_new, config.max_new, defaults::MAX_NEW),
        temperature: pick(temperature, config.temperature, defaults::TEMPERATURE),
        seeds: pick(seeds, config.seeds.clone(), defaults::SEEDS.to_vec()),
    }
}

// --- commands ---

fn cmd_make_toy(a: MakeToyArgs) -> Result<(), CliError> {
    let cfg = ModelConfig {
        n_layers: a.layers,
        n_heads_per_layer: a.heads,
        d_model: a.d_model,
        d_head: a.d_head,
        d_ff: a.d_ff,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
        ln_eps: a.ln_eps,
    };
    cfg.validate().map_err(|e| CliError::usage(format!("invalid model shape: {e}")))?;
    let w = weights_io::make_toy_model_with_std(&cfg, a.seed, a.init_std)
        .map_err(|e| CliError::usage(e.to_string()))?;
    weights_io::save(&cfg, &w, &a.out)
        .map_err(|e| CliError::compute(format!("cannot write {}: {e}", a.out.display())))?;
    eprintln!("wrote {}", a.out.display());
    eprintln!("model_hash={}", hash_file(&a.out)?);
    Ok(())
}

fn cmd_generate(a: GenerateArgs, config: &ConfigFile) -> Result<(), CliError> {
    let (cfg, w, model_hash) = load_model(&a.model)?;
    let (tokenizer, tag) = load_tokenizer(&a.tokenizer)?;
    let max_new = pick(a.max_new, config.max_new, defaults::MAX_NEW);
    let temperature = pick(a.temperature, config.temperature, defaults::TEMPERATURE);
    let seed = pick(a.seed, config.seeds.as_ref().and_then(|s| s.first().copied()), defaults::SEEDS[0]);

    let mut prompt_tokens = tokenizer.encode(&a.prompt);
    if prompt_tokens.is_empty() {
        prompt_tokens.push(BOS_ID);
    }
    let mask = HeadGateMask::all_on(cfg.n_heads());
    let tokens = generate(&cfg, &w, &mask, &prompt_tokens, max_new, temperature, seed, Some(EOS_ID))
        .map_err(|e| CliError::compute(format!("generation failed: {e}")))?;
    let text = tokenizer
        .decode(&tokens)
        .map_err(|e| CliError::compute(format!("cannot decode continuation: {e}")))?;
    println!("{text}");

    if let Some(out) = &a.out {
        let gp = GenParams { max_new, temperature, seeds: vec![seed] };
        let doc = GenerateDocument {
            provenance: DocProvenance {
                gen_params_hash: Some(gen_params_hash(&gp, &tag)),
                ..DocProvenance::model_only(model_hash)
            },
            prompt: a.prompt,
            temperature,
            seed,
            max_new,
            tokens,
            text,
        };
        write_json(out, &doc)?;
    }
    Ok(())
}

fn cmd_eval_ppl(a: EvalPplArgs, config: &ConfigFile) -> Result<(), CliError> {
    let (cfg, w, model_hash) = load_model(&a.model)?;
    let (tokenizer, tag) = load_tokenizer(&a.tokenizer)?;
    let window = pick(a.window, config.window, defaults::WINDOW);
    let (tokens, corpus_bytes) = load_corpus(&a.corpus, &tokenizer, &cfg, window)?;

    let mask = HeadGateMask::all_on(cfg.n_heads());
    let r = perplexity(&cfg, &w, &mask, &tokens, window)
        .map_err(|e| CliError::compute(format!("perplexity evaluation failed: {e}")))?;
    println!("ppl={} mean_nll={} tokens={}", r.ppl, r.mean_nll, r.total_tokens);

    if let Some(out) = &a.out {
        let doc = PplDocument {
            provenance: DocProvenance {
                corpus_hash: Some(corpus_hash(&corpus_bytes, &tag, window)),
                ..DocProvenance::model_only(model_hash)
            },
            window,
            ppl: r.ppl,
            mean_nll: r.mean_nll,
            total_tokens: r.total_tokens,
        };
        write_json(out, &doc)?;
    }
    Ok(())
}

fn cmd_eval_bias(a: EvalBiasArgs, config: &ConfigFile) -> Result<(), CliError> {
    let (cfg, w, model_hash) = load_model(&a.model)?;
    let (tokenizer, tag) = load_tokenizer(&a.tokenizer)?;
    let (dataset, prompt_bytes) = load_dataset(&a.prompts)?;
    let scorer = a.scorer.build()?;
    let val_ratio = pick(a.val_ratio, config.val_ratio, defaults::VAL_RATIO);
    let split_seed = pick(a.split_seed, config.split_seed, defaults::SPLIT_SEED);
    let gp = gen_params(a.seeds, a.max_new, a.temperature, config);

    let subset;
    let evaluated: &PromptDataset = match a.split {
        SplitChoice::All => &dataset,
        choice => {
            let s = split(&dataset, val_ratio, split_seed)
                .map_err(|e| CliError::usage(format!("cannot split dataset: {e}")))?;
            subset = if choice == SplitChoice::Validation { s.validation } else { s.test };
            &subset
        }
    };
    check_category(evaluated, &a.category)?;

    let mask = HeadGateMask::all_on(cfg.n_heads());
    let eval =
        evaluate_model_bias(&cfg, &w, &mask, evaluated, &a.category, &tokenizer, scorer.as_ref(), &gp)
            .map_err(|e| CliError::compute(format!("bias evaluation failed: {e}")))?;
    println!("bias={} category={} split={}", eval.pooled.bias, a.category, a.split.name());

    if let Some(out) = &a.out {
        let doc = BiasDocument {
            provenance: DocProvenance {
                dataset_hash: Some(dataset_hash(&prompt_bytes, a.split.name(), val_ratio, split_seed)),
                scorer_hash: Some(scorer.fingerprint()),
                gen_params_hash: Some(gen_params_hash(&gp, &tag)),
                ..DocProvenance::model_only(model_hash)
            },
            split: a.split.name().to_string(),
            pooled: eval.pooled,
            per_seed: eval
                .per_seed
                .into_iter()
                .map(|(seed, report)| SeedBias { seed, report })
                .collect(),
        };
        write_json(out, &doc)?;
    }
    Ok(())
}

fn resolve_cache_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("cache"))
}

fn cmd_score_heads(a: ScoreHeadsArgs, config: &ConfigFile) -> Result<(), CliError> {
    let (cfg, w, model_hash) = load_model(&a.model)?;
    let (tokenizer, tag) = load_tokenizer(&a.tokenizer)?;
    let window = pick(a.window, config.window, defaults::WINDOW);
    let (corpus_tokens, corpus_bytes) = load_corpus(&a.corpus, &tokenizer, &cfg, window)?;
    let (dataset, prompt_bytes) = load_dataset(&a.prompts)?;
    let scorer = a.scorer.build()?;
    let val_ratio = pick(a.val_ratio, config.val_ratio, defaults::VAL_RATIO);
    let split_seed = pick(a.split_seed, config.split_seed, defaults::SPLIT_SEED);
    let gp = gen_params(a.seeds, a.max_new, a.temperature, config);

    let categories: Vec<String> = if a.categories.is_empty() {
        dataset.categories().iter().map(|c| c.to_string()).collect()
    } else {
        a.categories.clone()
    };

    let validation = split(&dataset, val_ratio, split_seed)
        .map_err(|e| CliError::usage(format!("cannot split dataset: {e}")))?
        .validation;
    if validation.is_empty() {
        return Err(CliError::usage(format!(
            "val_ratio {val_ratio} leaves no validation prompts to score on"
        )));
    }
    for category in &categories {
        check_category(&validation, category)?;
    }

    let hashes = ProvenanceHashes {
        model_hash,
        dataset_hash: dataset_hash(&prompt_bytes, "validation", val_ratio, split_seed),
        corpus_hash: corpus_hash(&corpus_bytes, &tag, window),
        scorer_hash: scorer.fingerprint(),
        gen_params_hash: gen_params_hash(&gp, &tag),
    };

    let n = cfg.n_heads();
    let all_heads: Vec<usize> = (0..n).collect();
    let compute = |e: fasp::head_scoring::HeadScoringError| CliError::compute(e.to_string());

    let (baseline_ppl, z_ppl, baseline_bias, z_bias);
    if a.no_cache {
        let (bp, zp) = score_ppl_all(&cfg, &w, &corpus_tokens, window).map_err(compute)?;
        let mut bb = BTreeMap::new();
        let mut zb = BTreeMap::new();
        for category in &categories {
            let (b, z) = score_bias_all(
                &cfg, &w, &validation, category, &tokenizer, scorer.as_ref(), &gp, &all_heads,
            )
            .map_err(compute)?;
            bb.insert(category.clone(), b);
            zb.insert(category.clone(), z);
        }
        (baseline_ppl, z_ppl, baseline_bias, z_bias) = (bp, zp, bb, zb);
    } else {
        let cache = Cache::new(resolve_cache_dir(a.cache_dir.clone()));
        let (bp, zp) =
            score_ppl_all_cached(&cfg, &w, &corpus_tokens, window, &hashes, &cache).map_err(compute)?;
        let mut bb = BTreeMap::new();
        let mut zb = BTreeMap::new();
        for category in &categories {
            let (b, z) = score_bias_all_cached(
                &cfg, &w, &validation, category, &tokenizer, scorer.as_ref(), &gp, &all_heads,
                &hashes, &cache,
            )
            .map_err(compute)?;
            bb.insert(category.clone(), b);
            zb.insert(category.clone(), z);
        }
        let stats = cache.stats();
        eprintln!(
            "cache: {} hits, {} misses; fresh model evaluations: {}",
            stats.hits, stats.misses, stats.misses
        );
        (baseline_ppl, z_ppl, baseline_bias, z_bias) = (bp, zp, bb, zb);
    }

    let table = build_table(&cfg, hashes, baseline_ppl, &z_ppl, baseline_bias, &z_bias)
        .map_err(compute)?;
    table
        .save(&a.out)
        .map_err(|e| CliError::compute(format!("cannot write {}: {e}", a.out.display())))?;
    eprintln!("wrote {}", a.out.display());
    if let Some(csv) = &a.csv {
        write_text(csv, &analysis::table_csv(&table))?;
    }
    Ok(())
}

fn load_table(path: &Path) -> Result<HeadScoreTable, CliError> {
    read_input(path)?;
    HeadScoreTable::load(path)
        .map_err(|e| CliError::usage(format!("invalid score table {}: {e}", path.display())))
}

/// Use the flag when given, otherwise the single category the table was
/// scored on; ambiguous tables require the flag.
fn resolve_category(flag: Option<String>, table: &HeadScoreTable) -> Result<String, CliError> {
    if let Some(c) = flag {
        return Ok(c);
    }
    let mut cats: Vec<&String> = table.scores.iter().flat_map(|s| s.z_bias.keys()).collect();
    cats.sort();
    cats.dedup();
    match cats.as_slice() {
        [only] => Ok((*only).clone()),
        [] => Err(CliError::usage("the score table has no bias categories; pass --category")),
        many => Err(CliError::usage(format!(
            "the score table has {} categories; pass --category (one of: {})",
            many.len(),
            many.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn cmd_prune(a: PruneArgs, config: &ConfigFile) -> Result<(), CliError> {
    let (cfg, w, model_hash) = load_model(&a.model)?;
    let strategy = parse_strategy(&a.strategy)?;
    let alpha = a
        .alpha
        .or(config.alpha)
        .ok_or_else(|| CliError::usage("pass --alpha or set \"alpha\" in the config file"))?;
    let window = pick(a.window, config.window, defaults::WINDOW);

    let table = a.table.as_deref().map(load_table).transpose()?;
    if let Some(t) = &table {
        if t.n_heads() != cfg.n_heads() {
            return Err(CliError::usage(format!(
                "score table covers {} heads but the model has {}",
                t.n_heads(),
                cfg.n_heads()
            )));
        }
    }
    let category = match (&table, strategy) {
        (Some(t), Strategy::Fasp | Strategy::FairnessOnly) => {
            Some(resolve_category(a.category.clone(), t)?)
        }
        _ => a.category.clone(),
    };

    let (tokenizer, tag) = load_tokenizer(&a.tokenizer)?;
    let corpus = a
        .corpus
        .as_deref()
        .map(|p| load_corpus(p, &tokenizer, &cfg, window))
        .transpose()?;

    let ctx = PlanContext {
        model_cfg: &cfg,
        weights: &w,
        table: table.as_ref(),
        category: category.as_deref(),
        corpus: corpus.as_ref().map(|(t, _)| t.as_slice()),
        window,
        gamma: pick(a.gamma, config.gamma, defaults::GAMMA),
        random_seed: pick(a.random_seed, config.random_seed, defaults::RANDOM_SEED),
        fd_epsilon: pick(a.fd_epsilon, config.fd_epsilon, defaults::FD_EPSILON),
    };
    let plan = build_plan(&ctx, strategy, alpha).map_err(plan_error)?;
    println!(
        "strategy={} alpha={} protected={} pruned={}",
        plan.strategy,
        plan.alpha,
        plan.protected.len(),
        plan.pruned.len()
    );

    let provenance = match &table {
        Some(t) => t.hashes.clone().into(),
        None => DocProvenance {
            corpus_hash: corpus.as_ref().map(|(_, b)| corpus_hash(b, &tag, window)),
            ..DocProvenance::model_only(model_hash)
        },
    };
    write_json(&a.out, &PlanDocument { provenance, plan })
}

fn cmd_correlate(a: CorrelateArgs) -> Result<(), CliError> {
    let table = load_table(&a.table)?;
    let m = analysis::correlate(&table)
        .map_err(|e| CliError::usage(format!("cannot correlate {}: {e}", a.table.display())))?;
    write_text(&a.out, &analysis::correlation_csv(&m, &table.hashes))
}

fn cmd_sweep(a: SweepArgs, config: &ConfigFile) -> Result<(), CliError> {
    let (cfg, w, model_hash) = load_model(&a.model)?;
    let (tokenizer, tag) = load_tokenizer(&a.tokenizer)?;
    let window = pick(a.window, config.window, defaults::WINDOW);
    let (corpus_tokens, corpus_bytes) = load_corpus(&a.corpus, &tokenizer, &cfg, window)?;
    let (dataset, prompt_bytes) = load_dataset(&a.prompts)?;
    let table = load_table(&a.table)?;
    if table.n_heads() != cfg.n_heads() {
        return Err(CliError::usage(format!(
            "score table covers {} heads but the model has {}",
            table.n_heads(),
            cfg.n_heads()
        )));
    }
    let scorer = a.scorer.build()?;
    let category = resolve_category(a.category.clone(), &table)?;
    let val_ratio = pick(a.val_ratio, config.val_ratio, defaults::VAL_RATIO);
    let split_seed = pick(a.split_seed, config.split_seed, defaults::SPLIT_SEED);
    let gp = gen_params(a.seeds, a.max_new, a.temperature, config);

    let strategies: Vec<Strategy> = match &a.strategies {
        None => Strategy::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|s| parse_strategy(s))
            .collect::<Result<_, _>>()?,
    };

    // Final comparisons run on the held-out test side of the split.
    let test = split(&dataset, val_ratio, split_seed)
        .map_err(|e| CliError::usage(format!("cannot split dataset: {e}")))?
        .test;
    if test.is_empty() {
        return Err(CliError::usage(format!(
            "val_ratio {val_ratio} leaves no test prompts to evaluate on"
        )));
    }
    check_category(&test, &category)?;

    let ctx = PlanContext {
        model_cfg: &cfg,
        weights: &w,
        table: Some(&table),
        category: Some(&category),
        corpus: Some(&corpus_tokens),
        window,
        gamma: pick(a.gamma, config.gamma, defaults::GAMMA),
        random_seed: pick(a.random_seed, config.random_seed, defaults::RANDOM_SEED),
        fd_epsilon: pick(a.fd_epsilon, config.fd_epsilon, defaults::FD_EPSILON),
    };
    let outcome = sweep(
        &ctx, &strategies, &a.alphas, &test, &category, &tokenizer, scorer.as_ref(), &gp,
    )
    .map_err(plan_error)?;

    let hashes = ProvenanceHashes {
        model_hash,
        dataset_hash: dataset_hash(&prompt_bytes, "test", val_ratio, split_seed),
        corpus_hash: corpus_hash(&corpus_bytes, &tag, window),
        scorer_hash: scorer.fingerprint(),
        gen_params_hash: gen_params_hash(&gp, &tag),
    };
    write_text(&a.out, &analysis::sweep_csv(&outcome, &hashes))?;
    if let Some(json) = &a.json {
        write_json(json, &SweepDocument { provenance: hashes, outcome })?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs, config: &ConfigFile) -> Result<(), CliError> {
    let table = load_table(&a.table)?;
    let top_fraction = pick(a.top_fraction, config.top_fraction, defaults::TOP_FRACTION);
    let usage = |e: fasp::analysis::AnalysisError| CliError::usage(e.to_string());
    let correlation = if analysis::scored_categories(&table).len() >= 2 {
        Some(analysis::correlate(&table).map_err(usage)?)
    } else {
        None
    };
    let overlap = analysis::overlap(&table, top_fraction).map_err(usage)?;

    let sweep_outcome = a
        .sweep_json
        .as_deref()
        .map(|p| {
            let bytes = read_input(p)?;
            serde_json::from_slice::<fasp::pruning::SweepOutcome>(&bytes).map_err(|e| {
                CliError::usage(format!("invalid sweep JSON {}: {e}", p.display()))
            })
        })
        .transpose()?;

    write_text(
        &a.out,
        &analysis::report_markdown(&table, correlation.as_ref(), &overlap, sweep_outcome.as_ref()),
    )?;
    if let Some(p) = &a.overlap_out {
        write_text(p, &analysis::overlap_json(&overlap, &table.hashes))?;
    }
    if let Some(p) = &a.correlation_out {
        let correlation = correlation.as_ref().ok_or_else(|| {
            CliError::usage(
                "--correlation-out needs at least two scored categories in the table".to_string(),
            )
        })?;
        write_text(p, &analysis::correlation_csv(correlation, &table.hashes))?;
    }
    Ok(())
}
