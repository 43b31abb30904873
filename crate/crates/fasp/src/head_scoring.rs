//! Per-head ablation scores and their persistent cache.
//!
//! For each head the workbench measures what its presence does to a metric:
//! `z = metric(head present) - metric(head absent)`. For perplexity a
//! performance-critical head therefore has a negative `z_ppl` (removing it
//! makes perplexity worse), and for bias a bias-promoting head has a
//! positive `z_bias` (removing it lowers the disparity). Single-head
//! ablation is an approximation: the effect of removing several heads is
//! not the sum of their individual effects, and every consumer of these
//! scores accepts that.
//!
//! Scoring is the dominant cost (one full evaluation per head), so results
//! are cached per (all provenance hashes, metric, head) as human-readable
//! JSON files under `cache/<model_hash>/<metric>[.<category>].json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias_eval::scorer::ToxicityScorer;
use crate::bias_eval::{evaluate_model_bias, BiasEvalError, GenParams, PromptDataset};
use crate::hashing::sha256_hex;
use crate::model::{perplexity, HeadGateMask, HeadId, ModelConfig, ModelError, ModelWeights};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum HeadScoringError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bias(#[from] BiasEvalError),
    #[error("cache i/o on {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid score table: {detail}")]
    BadTable { detail: String },
    #[error("score table i/o on {path}: {source}")]
    TableIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("score table {path} is not valid JSON: {source}")]
    TableJson {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Content digests of every input that can change a score. Two runs with
/// equal hashes are interchangeable; any difference invalidates the cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceHashes {
    pub model_hash: String,
    pub dataset_hash: String,
    pub corpus_hash: String,
    pub scorer_hash: String,
    pub gen_params_hash: String,
}

impl ProvenanceHashes {
    pub fn validate(&self) -> Result<(), HeadScoringError> {
        for (name, v) in [
            ("model_hash", &self.model_hash),
            ("dataset_hash", &self.dataset_hash),
            ("corpus_hash", &self.corpus_hash),
            ("scorer_hash", &self.scorer_hash),
            ("gen_params_hash", &self.gen_params_hash),
        ] {
            if v.is_empty() {
                return Err(HeadScoringError::BadTable { detail: format!("{name} is empty") });
            }
        }
        Ok(())
    }
}

/// One head's scores. `z_ppl` is absent until perplexity scoring ran;
/// `z_bias` holds one entry per scored bias category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: HeadId,
    pub z_ppl: Option<f64>,
    pub z_bias: BTreeMap<String, f64>,
}

/// Scores for every head of one model plus the unpruned baselines and the
/// provenance hashes that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub scores: Vec<HeadScore>,
    pub hashes: ProvenanceHashes,
    pub baseline_ppl: f64,
    pub baseline_bias: BTreeMap<String, f64>,
}

impl HeadScoreTable {
    /// Check the one-entry-per-flat-index invariant and value finiteness.
    pub fn validate(&self) -> Result<(), HeadScoringError> {
        self.hashes.validate()?;
        for (i, s) in self.scores.iter().enumerate() {
            if s.head.flat_index != i {
                return Err(HeadScoringError::BadTable {
                    detail: format!("entry {i} has flat_index {}", s.head.flat_index),
                });
            }
            if let Some(z) = s.z_ppl {
                if !z.is_finite() {
                    return Err(HeadScoringError::BadTable {
                        detail: format!("head {i}: non-finite z_ppl"),
                    });
                }
            }
            for (cat, z) in &s.z_bias {
                if !z.is_finite() {
                    return Err(HeadScoringError::BadTable {
                        detail: format!("head {i}: non-finite z_bias for {cat:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_heads(&self) -> usize {
        self.scores.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadScoringError> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self).expect("table serializes");
        std::fs::write(path, json)
            .map_err(|source| HeadScoringError::TableIo { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, HeadScoringError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HeadScoringError::TableIo { path: path.display().to_string(), source })?;
        let table: HeadScoreTable = serde_json::from_str(&text)
            .map_err(|source| HeadScoringError::TableJson { path: path.display().to_string(), source })?;
        table.validate()?;
        Ok(table)
    }
}

/// Score every head's perplexity impact: baseline perplexity with all gates
/// on, then one single-head ablation per head. Exactly `N_h + 1` perplexity
/// evaluations; `z_ppl[h] = baseline_ppl - ppl(gate h = 0)`.
///
/// Head evaluations run in parallel; each evaluation is serial inside, so
/// results are bitwise identical to a serial run.
pub fn score_ppl_all(
    cfg: &ModelConfig,
    w: &ModelWeights,
    corpus_tokens: &[u32],
    window: usize,
) -> Result<(f64, Vec<f64>), HeadScoringError> {
    let n = cfg.n_heads();
    let baseline = perplexity(cfg, w, &HeadGateMask::all_on(n), corpus_tokens, window)?.ppl;
    let z: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|h| {
            let ablated =
                perplexity(cfg, w, &HeadGateMask::single_off(n, h), corpus_tokens, window)?;
            Ok(baseline - ablated.ppl)
        })
        .collect::<Result<_, HeadScoringError>>()?;
    Ok((baseline, z))
}

/// Score bias impact for a subset of heads in one category:
/// `z_bias[h] = baseline_bias - bias(gate h = 0)`, baseline computed once.
#[allow(clippy::too_many_arguments)]
pub fn score_bias_all(
    cfg: &ModelConfig,
    w: &ModelWeights,
    d_validation: &PromptDataset,
    category: &str,
    tokenizer: &Tokenizer,
    scorer: &dyn ToxicityScorer,
    gen_params: &GenParams,
    head_subset: &[usize],
) -> Result<(f64, BTreeMap<usize, f64>), HeadScoringError> {
    let n = cfg.n_heads();
    let baseline = evaluate_model_bias(
        cfg,
        w,
        &HeadGateMask::all_on(n),
        d_validation,
        category,
        tokenizer,
        scorer,
        gen_params,
    )?
    .pooled
    .bias;
    let mut z = BTreeMap::new();
    for &h in head_subset {
        let ablated = evaluate_model_bias(
            cfg,
            w,
            &HeadGateMask::single_off(n, h),
            d_validation,
            category,
            tokenizer,
            scorer,
            gen_params,
        )?
        .pooled
        .bias;
        z.insert(h, baseline - ablated);
    }
    Ok((baseline, z))
}

/// Assemble a validated table from raw scoring outputs.
pub fn build_table(
    cfg: &ModelConfig,
    hashes: ProvenanceHashes,
    baseline_ppl: f64,
    z_ppl: &[f64],
    baseline_bias: BTreeMap<String, f64>,
    z_bias: &BTreeMap<String, BTreeMap<usize, f64>>,
) -> Result<HeadScoreTable, HeadScoringError> {
    let n = cfg.n_heads();
    if z_ppl.len() != n {
        return Err(HeadScoringError::BadTable {
            detail: format!("expected {n} z_ppl values, got {}", z_ppl.len()),
        });
    }
    let scores = (0..n)
        .map(|h| HeadScore {
            head: HeadId::from_flat(h, cfg.n_heads_per_layer),
            z_ppl: Some(z_ppl[h]),
            z_bias: z_bias
                .iter()
                .filter_map(|(cat, m)| m.get(&h).map(|&z| (cat.clone(), z)))
                .collect(),
        })
        .collect();
    let table = HeadScoreTable { scores, hashes, baseline_ppl, baseline_bias };
    table.validate()?;
    Ok(table)
}

// --- cache -----------------------------------------------------------------

/// Which metric a cache file stores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Metric {
    Ppl,
    Bias { category: String },
}

impl Metric {
    /// File name under the model-hash directory. Category names are
    /// sanitized for the filesystem; a short content hash disambiguates
    /// names the sanitizer would collide.
    fn file_name(&self) -> String {
        match self {
            Metric::Ppl => "ppl.json".to_string(),
            Metric::Bias { category } => {
                let safe: String = category
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
                    .collect();
                if safe == *category {
                    format!("bias.{safe}.json")
                } else {
                    format!("bias.{safe}.{}.json", &sha256_hex(category.as_bytes())[..8])
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct CacheFile {
    hashes: Option<ProvenanceHashes>,
    baseline: Option<f64>,
    scores: BTreeMap<String, f64>,
}

/// Totals since this cache handle was created.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// One JSON file per (model hash, metric, category); entries are keyed by
/// flat head index, with the unpruned baseline stored alongside.
///
/// Files are replaced atomically (write to a temp file, then rename) and
/// in-process access is serialized by a mutex. A file whose embedded hashes
/// disagree with the requested key, or that fails to parse, counts as a
/// miss; parse failures additionally print a warning to stderr. Stale or
/// corrupt entries are overwritten on the next put.
pub struct Cache {
    root: PathBuf,
    io_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Cache { root: root.into(), io_lock: Mutex::new(()), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    fn path_for(&self, hashes: &ProvenanceHashes, metric: &Metric) -> PathBuf {
        self.root.join(&hashes.model_hash).join(metric.file_name())
    }

    fn read_valid(&self, path: &Path, hashes: &ProvenanceHashes) -> Option<CacheFile> {
        let bytes = std::fs::read(path).ok()?;
        match serde_json::from_slice::<CacheFile>(&bytes) {
            Ok(file) if file.hashes.as_ref() == Some(hashes) => Some(file),
            Ok(_) => None,
            Err(e) => {
                eprintln!("warning: ignoring corrupt cache file {}: {e}", path.display());
                None
            }
        }
    }

    /// Fetch one value; `head: None` addresses the baseline.
    pub fn get(&self, hashes: &ProvenanceHashes, metric: &Metric, head: Option<usize>) -> Option<f64> {
        let _guard = self.io_lock.lock().expect("cache lock");
        let path = self.path_for(hashes, metric);
        let value = self.read_valid(&path, hashes).and_then(|f| match head {
            None => f.baseline,
            Some(h) => f.scores.get(&h.to_string()).copied(),
        });
        match value {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        value
    }

    /// Store one value, merging into the existing file when its hashes
    /// match and replacing it when they do not.
    pub fn put(
        &self,
        hashes: &ProvenanceHashes,
        metric: &Metric,
        head: Option<usize>,
        value: f64,
    ) -> Result<(), HeadScoringError> {
        let _guard = self.io_lock.lock().expect("cache lock");
        let path = self.path_for(hashes, metric);
        let io_err = |source: std::io::Error| HeadScoringError::CacheIo {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut file = self.read_valid(&path, hashes).unwrap_or_default();
        file.hashes = Some(hashes.clone());
        match head {
            None => file.baseline = Some(value),
            Some(h) => {
                file.scores.insert(h.to_string(), value);
            }
        }
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&file).expect("cache serializes"))
            .map_err(io_err)?;
        std::fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

/// Cache-aware variant of [`score_ppl_all`]: consult the cache per head and
/// compute only the missing entries. A fully warm cache performs zero
/// perplexity evaluations.
pub fn score_ppl_all_cached(
    cfg: &ModelConfig,
    w: &ModelWeights,
    corpus_tokens: &[u32],
    window: usize,
    hashes: &ProvenanceHashes,
    cache: &Cache,
) -> Result<(f64, Vec<f64>), HeadScoringError> {
    let n = cfg.n_heads();
    let metric = Metric::Ppl;
    let baseline = match cache.get(hashes, &metric, None) {
        Some(v) => v,
        None => {
            let v = perplexity(cfg, w, &HeadGateMask::all_on(n), corpus_tokens, window)?.ppl;
            cache.put(hashes, &metric, None, v)?;
            v
        }
    };
    let cached: Vec<Option<f64>> = (0..n).map(|h| cache.get(hashes, &metric, Some(h))).collect();
    let fresh: Vec<(usize, f64)> = cached
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(h, _)| h)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|h| {
            let ablated =
                perplexity(cfg, w, &HeadGateMask::single_off(n, h), corpus_tokens, window)?;
            Ok((h, baseline - ablated.ppl))
        })
        .collect::<Result<_, HeadScoringError>>()?;
    let mut z: Vec<f64> = cached.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    for (h, value) in fresh {
        cache.put(hashes, &metric, Some(h), value)?;
        z[h] = value;
    }
    Ok((baseline, z))
}

/// Cache-aware variant of [`score_bias_all`].
#[allow(clippy::too_many_arguments)]
pub fn score_bias_all_cached(
    cfg: &ModelConfig,
    w: &ModelWeights,
    d_validation: &PromptDataset,
    category: &str,
    tokenizer: &Tokenizer,
    scorer: &dyn ToxicityScorer,
    gen_params: &GenParams,
    head_subset: &[usize],
    hashes: &ProvenanceHashes,
    cache: &Cache,
) -> Result<(f64, BTreeMap<usize, f64>), HeadScoringError> {
    let n = cfg.n_heads();
    let metric = Metric::Bias { category: category.to_string() };
    let baseline = match cache.get(hashes, &metric, None) {
        Some(v) => v,
        None => {
            let v = evaluate_model_bias(
                cfg,
                w,
                &HeadGateMask::all_on(n),
                d_validation,
                category,
                tokenizer,
                scorer,
                gen_params,
            )?
            .pooled
            .bias;
            cache.put(hashes, &metric, None, v)?;
            v
        }
    };
    let mut z = BTreeMap::new();
    for &h in head_subset {
        let value = match cache.get(hashes, &metric, Some(h)) {
            Some(v) => v,
            None => {
                let ablated = evaluate_model_bias(
                    cfg,
                    w,
                    &HeadGateMask::single_off(n, h),
                    d_validation,
                    category,
                    tokenizer,
                    scorer,
                    gen_params,
                )?
                .pooled
                .bias;
                let v = baseline - ablated;
                cache.put(hashes, &metric, Some(h), v)?;
                v
            }
        };
        z.insert(h, value);
    }
    Ok((baseline, z))
}
