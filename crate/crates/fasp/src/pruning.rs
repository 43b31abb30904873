//! Pruning plan construction and evaluation sweeps.
//!
//! The fairness-aware strategy first protects the `floor(gamma * N_h)`
//! heads whose removal hurts perplexity the most (lowest `z_ppl`), then
//! prunes the `round(alpha * N_h)` remaining heads with the highest
//! `z_bias` (most bias-promoting first). Five baselines cover the usual
//! alternatives: weight magnitude, loss gradient (via finite differences on
//! the head gate), random selection, bias ranking alone, and perplexity
//! ranking alone.
//!
//! Counting rules are fixed so plans are deterministic: protected counts
//! round down, pruned counts round half up, and every ranking breaks ties
//! toward the lower flat head index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias_eval::scorer::ToxicityScorer;
use crate::bias_eval::{evaluate_model_bias, BiasEvalError, GenParams, PromptDataset};
use crate::hashing::stream_id;
use crate::head_scoring::HeadScoreTable;
use crate::model::{perplexity, HeadGateMask, ModelConfig, ModelError, ModelWeights};
use crate::rng::CounterRng;
use crate::tensor::{argsort_asc, argsort_desc};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum PruningError {
    #[error("alpha {alpha} exceeds 1 - gamma = {} (cannot prune protected heads)", 1.0 - gamma)]
    AlphaGammaConflict { alpha: f64, gamma: f64 },
    #[error("{name} = {value} is outside {range}")]
    BadRatio { name: &'static str, value: f64, range: &'static str },
    #[error("finite-difference epsilon {value} must be in (0, 1]")]
    BadEpsilon { value: f64 },
    #[error("score table is missing {what}")]
    MissingScores { what: String },
    #[error("strategy {strategy} requires {what}")]
    MissingInput { strategy: Strategy, what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bias(#[from] BiasEvalError),
}

/// Available head-selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fasp,
    Magnitude,
    Gradient,
    Random,
    FairnessOnly,
    PerformanceOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Fasp,
        Strategy::Magnitude,
        Strategy::Gradient,
        Strategy::Random,
        Strategy::FairnessOnly,
        Strategy::PerformanceOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Fasp => "fasp",
            Strategy::Magnitude => "magnitude",
            Strategy::Gradient => "gradient",
            Strategy::Random => "random",
            Strategy::FairnessOnly => "fairness_only",
            Strategy::PerformanceOnly => "performance_only",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}; expected one of fasp, magnitude, gradient, random, fairness_only, performance_only"))
    }
}

/// Number of protected heads: `floor(gamma * n_heads)`.
pub fn protected_count(gamma: f64, n_heads: usize) -> usize {
    (gamma * n_heads as f64).floor() as usize
}

/// Number of pruned heads: `alpha * n_heads`, rounded half up.
pub fn pruned_count(alpha: f64, n_heads: usize) -> usize {
    (alpha * n_heads as f64 + 0.5).floor() as usize
}

fn check_ratio(name: &'static str, value: f64, max_inclusive: bool) -> Result<(), PruningError> {
    let ok = value.is_finite() && value >= 0.0 && if max_inclusive { value <= 1.0 } else { value < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(PruningError::BadRatio {
            name,
            value,
            range: if max_inclusive { "[0, 1]" } else { "[0, 1)" },
        })
    }
}

/// An ordered pruning decision. `pruned` is in priority order: its length-k
/// prefix is exactly the plan for a pruning ratio of k heads, so smaller
/// ratios are prefixes of larger ones under the same ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub strategy: Strategy,
    pub gamma: f64,
    pub alpha: f64,
    /// Protected flat head indices (fairness-aware strategy only), sorted.
    pub protected: Vec<usize>,
    /// Pruned flat head indices, most prunable first.
    pub pruned: Vec<usize>,
}

impl PruningPlan {
    /// Gate mask with zeros at the first `k` pruned heads.
    pub fn mask_for_prefix(&self, k: usize, n_heads: usize) -> HeadGateMask {
        let mut gates = vec![1.0f32; n_heads];
        for &h in self.pruned.iter().take(k) {
            gates[h] = 0.0;
        }
        HeadGateMask::new(gates).expect("binary gates are always valid")
    }
}

/// Gate mask realizing the full plan.
pub fn apply_plan(plan: &PruningPlan, n_heads: usize) -> HeadGateMask {
    plan.mask_for_prefix(plan.pruned.len(), n_heads)
}

fn z_ppl_vector(table: &HeadScoreTable) -> Result<Vec<f64>, PruningError> {
    table
        .scores
        .iter()
        .map(|s| {
            s.z_ppl.ok_or_else(|| PruningError::MissingScores {
                what: format!("z_ppl for head {}", s.head.flat_index),
            })
        })
        .collect()
}

fn z_bias_for(table: &HeadScoreTable, category: &str, heads: &[usize]) -> Result<Vec<f64>, PruningError> {
    heads
        .iter()
        .map(|&h| {
            table.scores[h].z_bias.get(category).copied().ok_or_else(|| {
                PruningError::MissingScores {
                    what: format!("z_bias[{category:?}] for head {h}"),
                }
            })
        })
        .collect()
}

/// Fairness-aware plan: protect the `floor(gamma*N_h)` lowest-`z_ppl` heads,
/// then prune the `round(alpha*N_h)` highest-`z_bias` heads of the rest.
pub fn plan_fasp(
    table: &HeadScoreTable,
    category: &str,
    gamma: f64,
    alpha: f64,
) -> Result<PruningPlan, PruningError> {
    check_ratio("gamma", gamma, false)?;
    check_ratio("alpha", alpha, true)?;
    if alpha > 1.0 - gamma {
        return Err(PruningError::AlphaGammaConflict { alpha, gamma });
    }
    let n = table.n_heads();
    let z_ppl = z_ppl_vector(table)?;
    let by_ppl = argsort_asc(&z_ppl);
    let mut protected: Vec<usize> = by_ppl[..protected_count(gamma, n)].to_vec();
    protected.sort_unstable();

    let mut candidates: Vec<usize> =
        (0..n).filter(|h| !protected.contains(h)).collect();
    let z_bias = z_bias_for(table, category, &candidates)?;
    let order = argsort_desc(&z_bias);
    candidates = order.iter().map(|&i| candidates[i]).collect();

    let k = pruned_count(alpha, n);
    debug_assert!(k <= candidates.len(), "alpha <= 1-gamma bounds the pruned count");
    Ok(PruningPlan {
        strategy: Strategy::Fasp,
        gamma,
        alpha,
        protected,
        pruned: candidates[..k].to_vec(),
    })
}

/// Prune purely by bias impact, highest `z_bias` first.
pub fn plan_fairness_only(
    table: &HeadScoreTable,
    category: &str,
    alpha: f64,
) -> Result<PruningPlan, PruningError> {
    check_ratio("alpha", alpha, true)?;
    let n = table.n_heads();
    let heads: Vec<usize> = (0..n).collect();
    let z_bias = z_bias_for(table, category, &heads)?;
    let order = argsort_desc(&z_bias);
    let k = pruned_count(alpha, n);
    Ok(PruningPlan {
        strategy: Strategy::FairnessOnly,
        gamma: 0.0,
        alpha,
        protected: Vec::new(),
        pruned: order[..k].to_vec(),
    })
}

/// Prune purely by perplexity impact, highest `z_ppl` first (the heads
/// whose removal most improves or least hurts perplexity).
pub fn plan_performance_only(table: &HeadScoreTable, alpha: f64) -> Result<PruningPlan, PruningError> {
    check_ratio("alpha", alpha, true)?;
    let n = table.n_heads();
    let z_ppl = z_ppl_vector(table)?;
    let order = argsort_desc(&z_ppl);
    let k = pruned_count(alpha, n);
    Ok(PruningPlan {
        strategy: Strategy::PerformanceOnly,
        gamma: 0.0,
        alpha,
        protected: Vec::new(),
        pruned: order[..k].to_vec(),
    })
}

/// L2 norm of one head's parameter slices: the `d_head` columns of W_Q,
/// W_K, and W_V plus the `d_head` rows of W_O (biases excluded).
pub fn head_magnitude(cfg: &ModelConfig, w: &ModelWeights, flat_index: usize) -> f64 {
    let layer = flat_index / cfg.n_heads_per_layer;
    let head = flat_index % cfg.n_heads_per_layer;
    let d = cfg.d_model;
    let col0 = head * cfg.d_head;
    let l = &w.layers[layer];
    let mut sum = 0.0f64;
    for m in [&l.w_q, &l.w_k, &l.w_v] {
        for r in 0..d {
            for c in col0..col0 + cfg.d_head {
                let v = m.data()[r * d + c] as f64;
                sum += v * v;
            }
        }
    }
    for r in col0..col0 + cfg.d_head {
        for c in 0..d {
            let v = l.w_o.data()[r * d + c] as f64;
            sum += v * v;
        }
    }
    sum.sqrt()
}

/// Prune the smallest-norm heads first.
pub fn plan_magnitude(
    cfg: &ModelConfig,
    w: &ModelWeights,
    alpha: f64,
) -> Result<PruningPlan, PruningError> {
    check_ratio("alpha", alpha, true)?;
    let n = cfg.n_heads();
    let norms: Vec<f64> = (0..n).map(|h| head_magnitude(cfg, w, h)).collect();
    let order = argsort_asc(&norms);
    let k = pruned_count(alpha, n);
    Ok(PruningPlan {
        strategy: Strategy::Magnitude,
        gamma: 0.0,
        alpha,
        protected: Vec::new(),
        pruned: order[..k].to_vec(),
    })
}

/// Gate sensitivity of one head: `|dL/dgate|` by central finite difference
/// at gate = 1, where L is mean NLL on the corpus.
pub fn head_gradient_importance(
    cfg: &ModelConfig,
    w: &ModelWeights,
    corpus_tokens: &[u32],
    window: usize,
    flat_index: usize,
    fd_epsilon: f64,
) -> Result<f64, PruningError> {
    if !(fd_epsilon.is_finite() && fd_epsilon > 0.0 && fd_epsilon <= 1.0) {
        return Err(PruningError::BadEpsilon { value: fd_epsilon });
    }
    let n = cfg.n_heads();
    let base = HeadGateMask::all_on(n);
    let up = base.with_gate(flat_index, (1.0 + fd_epsilon) as f32)?;
    let down = base.with_gate(flat_index, (1.0 - fd_epsilon) as f32)?;
    let l_up = perplexity(cfg, w, &up, corpus_tokens, window)?.mean_nll;
    let l_down = perplexity(cfg, w, &down, corpus_tokens, window)?.mean_nll;
    Ok(((l_up - l_down) / (2.0 * fd_epsilon)).abs())
}

/// Prune the heads the loss is least sensitive to, smallest gradient first.
pub fn plan_gradient(
    cfg: &ModelConfig,
    w: &ModelWeights,
    corpus_tokens: &[u32],
    window: usize,
    alpha: f64,
    fd_epsilon: f64,
) -> Result<PruningPlan, PruningError> {
    check_ratio("alpha", alpha, true)?;
    let n = cfg.n_heads();
    let importances: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|h| head_gradient_importance(cfg, w, corpus_tokens, window, h, fd_epsilon))
        .collect::<Result<_, _>>()?;
    let order = argsort_asc(&importances);
    let k = pruned_count(alpha, n);
    Ok(PruningPlan {
        strategy: Strategy::Gradient,
        gamma: 0.0,
        alpha,
        protected: Vec::new(),
        pruned: order[..k].to_vec(),
    })
}

/// Seeded uniform sample of heads without replacement.
pub fn plan_random(n_heads: usize, alpha: f64, seed: u64) -> Result<PruningPlan, PruningError> {
    check_ratio("alpha", alpha, true)?;
    let mut heads: Vec<usize> = (0..n_heads).collect();
    CounterRng::with_stream(seed, stream_id("plan_random")).shuffle(&mut heads);
    let k = pruned_count(alpha, n_heads);
    Ok(PruningPlan {
        strategy: Strategy::Random,
        gamma: 0.0,
        alpha,
        protected: Vec::new(),
        pruned: heads[..k].to_vec(),
    })
}

/// Everything strategies may need; a strategy errors if its input is absent.
pub struct PlanContext<'a> {
    pub model_cfg: &'a ModelConfig,
    pub weights: &'a ModelWeights,
    pub table: Option<&'a HeadScoreTable>,
    pub category: Option<&'a str>,
    pub corpus: Option<&'a [u32]>,
    pub window: usize,
    pub gamma: f64,
    pub random_seed: u64,
    pub fd_epsilon: f64,
}

impl<'a> PlanContext<'a> {
    fn table(&self, strategy: Strategy) -> Result<&'a HeadScoreTable, PruningError> {
        self.table.ok_or(PruningError::MissingInput { strategy, what: "a head score table" })
    }

    fn category(&self, strategy: Strategy) -> Result<&'a str, PruningError> {
        self.category.ok_or(PruningError::MissingInput { strategy, what: "a bias category" })
    }

    fn corpus(&self, strategy: Strategy) -> Result<&'a [u32], PruningError> {
        self.corpus.ok_or(PruningError::MissingInput { strategy, what: "a token corpus" })
    }
}

/// Dispatch plan construction for any strategy.
pub fn build_plan(
    ctx: &PlanContext,
    strategy: Strategy,
    alpha: f64,
) -> Result<PruningPlan, PruningError> {
    match strategy {
        Strategy::Fasp => {
            plan_fasp(ctx.table(strategy)?, ctx.category(strategy)?, ctx.gamma, alpha)
        }
        Strategy::FairnessOnly => {
            plan_fairness_only(ctx.table(strategy)?, ctx.category(strategy)?, alpha)
        }
        Strategy::PerformanceOnly => plan_performance_only(ctx.table(strategy)?, alpha),
        Strategy::Magnitude => plan_magnitude(ctx.model_cfg, ctx.weights, alpha),
        Strategy::Gradient => plan_gradient(
            ctx.model_cfg,
            ctx.weights,
            ctx.corpus(strategy)?,
            ctx.window,
            alpha,
            ctx.fd_epsilon,
        ),
        Strategy::Random => plan_random(ctx.model_cfg.n_heads(), alpha, ctx.random_seed),
    }
}

/// Percentage change of `value` relative to `base`.
pub fn pct_change(base: f64, value: f64) -> f64 {
    100.0 * (value - base) / base
}

/// One sweep measurement. `seed: None` is the pooled row across all seeds.
/// `bias_change_pct` is absent when the unpruned baseline bias is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub alpha: f64,
    pub seed: Option<u64>,
    pub ppl: f64,
    pub ppl_change_pct: f64,
    pub bias: f64,
    pub bias_change_pct: Option<f64>,
}

/// Full sweep result: baselines plus one row group per (strategy, alpha).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub category: String,
    pub gamma: f64,
    pub baseline_ppl: f64,
    pub baseline_bias_pooled: f64,
    pub baseline_bias_per_seed: Vec<(u64, f64)>,
    pub rows: Vec<SweepRow>,
}

fn bias_pct(base: f64, value: f64) -> Option<f64> {
    (base != 0.0).then(|| pct_change(base, value))
}

/// Evaluate every (strategy, alpha) cell on the test split and corpus,
/// reporting absolute metrics and percentage change against the unpruned
/// model, per seed and pooled.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    ctx: &PlanContext,
    strategies: &[Strategy],
    alphas: &[f64],
    test_set: &PromptDataset,
    category: &str,
    tokenizer: &Tokenizer,
    scorer: &dyn ToxicityScorer,
    gen_params: &GenParams,
) -> Result<SweepOutcome, PruningError> {
    let n = ctx.model_cfg.n_heads();
    let corpus = ctx.corpus(Strategy::PerformanceOnly)?;
    let all_on = HeadGateMask::all_on(n);
    let baseline_ppl = perplexity(ctx.model_cfg, ctx.weights, &all_on, corpus, ctx.window)?.ppl;
    let baseline_bias = evaluate_model_bias(
        ctx.model_cfg,
        ctx.weights,
        &all_on,
        test_set,
        category,
        tokenizer,
        scorer,
        gen_params,
    )?;

    let mut rows = Vec::new();
    for &strategy in strategies {
        for &alpha in alphas {
            let plan = build_plan(ctx, strategy, alpha)?;
            let mask = apply_plan(&plan, n);
            let ppl = perplexity(ctx.model_cfg, ctx.weights, &mask, corpus, ctx.window)?.ppl;
            let bias = evaluate_model_bias(
                ctx.model_cfg,
                ctx.weights,
                &mask,
                test_set,
                category,
                tokenizer,
                scorer,
                gen_params,
            )?;
            for ((seed, report), (_, base)) in
                bias.per_seed.iter().zip(&baseline_bias.per_seed)
            {
                rows.push(SweepRow {
                    strategy,
                    alpha,
                    seed: Some(*seed),
                    ppl,
                    ppl_change_pct: pct_change(baseline_ppl, ppl),
                    bias: report.bias,
                    bias_change_pct: bias_pct(base.bias, report.bias),
                });
            }
            rows.push(SweepRow {
                strategy,
                alpha,
                seed: None,
                ppl,
                ppl_change_pct: pct_change(baseline_ppl, ppl),
                bias: bias.pooled.bias,
                bias_change_pct: bias_pct(baseline_bias.pooled.bias, bias.pooled.bias),
            });
        }
    }
    Ok(SweepOutcome {
        category: category.to_string(),
        gamma: ctx.gamma,
        baseline_ppl,
        baseline_bias_pooled: baseline_bias.pooled.bias,
        baseline_bias_per_seed: baseline_bias.per_seed.iter().map(|(s, r)| (*s, r.bias)).collect(),
        rows,
    })
}
