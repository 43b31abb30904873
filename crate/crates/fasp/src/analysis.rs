//! Cross-category analysis of head bias scores and deterministic report
//! emission.
//!
//! All emitted artifacts (CSV, JSON, Markdown) are byte-deterministic for
//! the same inputs: map keys are sorted, floats use Rust's shortest
//! round-trip formatting, and nothing time- or path-dependent is written.
//! Head indices in every artifact are 0-based flat indices
//! (`flat = layer * heads_per_layer + head`).

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::head_scoring::{HeadScoreTable, ProvenanceHashes};
use crate::pruning::{pruned_count, SweepOutcome};
use crate::tensor::{argsort_desc, pearson, TensorError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least two categories, got {got}")]
    TooFewCategories { got: usize },
    #[error("top fraction {value} is outside [0, 1]")]
    BadFraction { value: f64 },
    #[error("score table is missing {what}")]
    MissingScores { what: String },
    #[error("category {category:?} is not in the score table")]
    UnknownCategory { category: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pearson correlation of per-head bias contributions between every pair
/// of categories. `None` cells mark pairs where at least one side is
/// constant across heads, so the correlation is undefined. The diagonal is
/// exactly 1 and the matrix is symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub categories: Vec<String>,
    cells: Vec<Option<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.categories.len() + col]
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Sorted, deduplicated list of every category scored anywhere in a table.
pub fn scored_categories(table: &HeadScoreTable) -> Vec<String> {
    let mut cats: Vec<String> = table
        .scores
        .iter()
        .flat_map(|s| s.z_bias.keys().cloned())
        .collect();
    cats.sort();
    cats.dedup();
    cats
}

/// Like [`scored_categories`], erroring when fewer than `min` exist.
fn categories_at_least(table: &HeadScoreTable, min: usize) -> Result<Vec<String>, AnalysisError> {
    let cats = scored_categories(table);
    if cats.len() < min {
        return Err(AnalysisError::TooFewCategories { got: cats.len() });
    }
    Ok(cats)
}

fn z_bias_column(table: &HeadScoreTable, category: &str) -> Result<Vec<f64>, AnalysisError> {
    table
        .scores
        .iter()
        .map(|s| {
            s.z_bias.get(category).copied().ok_or_else(|| AnalysisError::MissingScores {
                what: format!("z_bias[{category:?}] for head {}", s.head.flat_index),
            })
        })
        .collect()
}

/// Correlate `z_bias` across categories over all heads.
pub fn correlate(table: &HeadScoreTable) -> Result<CorrelationMatrix, AnalysisError> {
    let categories = categories_at_least(table, 2)?;
    let columns: Vec<Vec<f64>> = categories
        .iter()
        .map(|c| z_bias_column(table, c))
        .collect::<Result<_, _>>()?;
    let k = categories.len();
    let mut cells = vec![None; k * k];
    for i in 0..k {
        cells[i * k + i] = Some(1.0);
        for j in i + 1..k {
            let r = match pearson(&columns[i], &columns[j]) {
                Ok(r) => Some(r),
                Err(TensorError::ConstantVector { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            cells[i * k + j] = r;
            cells[j * k + i] = r;
        }
    }
    Ok(CorrelationMatrix { categories, cells })
}

/// The `round(fraction * N_h)` most bias-promoting heads for a category,
/// highest `z_bias` first. A smaller fraction always yields a prefix of a
/// larger one.
pub fn top_heads(
    table: &HeadScoreTable,
    category: &str,
    fraction: f64,
) -> Result<Vec<usize>, AnalysisError> {
    if !(fraction.is_finite() && (0.0..=1.0).contains(&fraction)) {
        return Err(AnalysisError::BadFraction { value: fraction });
    }
    if !table.scores.iter().any(|s| s.z_bias.contains_key(category)) {
        return Err(AnalysisError::UnknownCategory { category: category.to_string() });
    }
    let z = z_bias_column(table, category)?;
    let order = argsort_desc(&z);
    let k = pruned_count(fraction, table.n_heads());
    Ok(order[..k].to_vec())
}

/// Per-category top head sets and the heads shared across categories.
/// `shared_by[m]` lists heads (ascending) that appear in at least `m` of
/// the per-category sets, for every `m` from 2 to the category count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub top_fraction: f64,
    pub sets: BTreeMap<String, Vec<usize>>,
    pub shared_by: BTreeMap<String, Vec<usize>>,
}

pub fn overlap(table: &HeadScoreTable, fraction: f64) -> Result<OverlapReport, AnalysisError> {
    let categories = categories_at_least(table, 1)?;
    let mut sets = BTreeMap::new();
    let mut membership = vec![0usize; table.n_heads()];
    for cat in &categories {
        let heads = top_heads(table, cat, fraction)?;
        for &h in &heads {
            membership[h] += 1;
        }
        sets.insert(cat.clone(), heads);
    }
    let mut shared_by = BTreeMap::new();
    for m in 2..=categories.len() {
        let heads: Vec<usize> =
            (0..membership.len()).filter(|&h| membership[h] >= m).collect();
        shared_by.insert(m.to_string(), heads);
    }
    Ok(OverlapReport { top_fraction: fraction, sets, shared_by })
}

#[derive(Serialize)]
struct OverlapDocument<'a> {
    provenance: &'a ProvenanceHashes,
    #[serde(flatten)]
    report: &'a OverlapReport,
}

/// Overlap report as pretty-printed JSON with embedded provenance.
pub fn overlap_json(report: &OverlapReport, hashes: &ProvenanceHashes) -> String {
    let mut s = serde_json::to_string_pretty(&OverlapDocument { provenance: hashes, report })
        .expect("overlap report serializes");
    s.push('\n');
    s
}

/// Shortest round-trip decimal form; all emitted values are finite.
fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Quote a CSV field only when it needs it.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn provenance_comments(hashes: &ProvenanceHashes) -> String {
    format!(
        "# model_hash={}\n# dataset_hash={}\n# corpus_hash={}\n# scorer_hash={}\n# gen_params_hash={}\n",
        hashes.model_hash,
        hashes.dataset_hash,
        hashes.corpus_hash,
        hashes.scorer_hash,
        hashes.gen_params_hash
    )
}

/// Head score table as CSV: one row per head, one `z_bias` column per
/// category, provenance in leading `#` comments.
pub fn table_csv(table: &HeadScoreTable) -> String {
    let mut cats: Vec<String> = table
        .scores
        .iter()
        .flat_map(|s| s.z_bias.keys().cloned())
        .collect();
    cats.sort();
    cats.dedup();

    let mut out = provenance_comments(&table.hashes);
    out.push_str("# head indices are 0-based flat indices (layer * heads_per_layer + head)\n");
    out.push_str(&format!("# baseline_ppl={}\n", fmt(table.baseline_ppl)));
    for (cat, b) in &table.baseline_bias {
        out.push_str(&format!("# baseline_bias[{}]={}\n", cat, fmt(*b)));
    }
    out.push_str("flat_index,layer,head,z_ppl");
    for cat in &cats {
        out.push_str(&format!(",z_bias:{}", csv_field(cat)));
    }
    out.push('\n');
    for s in &table.scores {
        out.push_str(&format!("{},{},{}", s.head.flat_index, s.head.layer, s.head.head));
        match s.z_ppl {
            Some(z) => out.push_str(&format!(",{}", fmt(z))),
            None => out.push(','),
        }
        for cat in &cats {
            match s.z_bias.get(cat) {
                Some(z) => out.push_str(&format!(",{}", fmt(*z))),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Correlation matrix as CSV: category header row and column, `NA` for
/// undefined cells.
pub fn correlation_csv(m: &CorrelationMatrix, hashes: &ProvenanceHashes) -> String {
    let mut out = provenance_comments(hashes);
    out.push_str("# pearson correlation of per-head z_bias between categories; NA = undefined (constant vector)\n");
    out.push_str("category");
    for cat in &m.categories {
        out.push(',');
        out.push_str(&csv_field(cat));
    }
    out.push('\n');
    for (i, cat) in m.categories.iter().enumerate() {
        out.push_str(&csv_field(cat));
        for j in 0..m.len() {
            out.push(',');
            match m.get(i, j) {
                Some(r) => out.push_str(&fmt(r)),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Sweep rows as CSV. The `seed` column is `pooled` for rows aggregated
/// over all generation seeds; `bias_change_pct` is empty when the baseline
/// bias is zero.
pub fn sweep_csv(outcome: &SweepOutcome, hashes: &ProvenanceHashes) -> String {
    let mut out = provenance_comments(hashes);
    out.push_str(&format!(
        "# category={} gamma={} baseline_ppl={} baseline_bias={}\n",
        csv_field(&outcome.category),
        fmt(outcome.gamma),
        fmt(outcome.baseline_ppl),
        fmt(outcome.baseline_bias_pooled)
    ));
    out.push_str("strategy,alpha,seed,ppl,ppl_change_pct,bias,bias_change_pct\n");
    for row in &outcome.rows {
        let seed = match row.seed {
            Some(s) => s.to_string(),
            None => "pooled".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.strategy,
            fmt(row.alpha),
            seed,
            fmt(row.ppl),
            fmt(row.ppl_change_pct),
            fmt(row.bias),
            row.bias_change_pct.map(fmt).unwrap_or_default()
        ));
    }
    out
}

fn md_heads(heads: &[usize]) -> String {
    if heads.is_empty() {
        "(none)".to_string()
    } else {
        heads.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(", ")
    }
}

/// Full Markdown report: provenance, baselines, per-category top heads,
/// cross-category overlap, the correlation matrix (when at least two
/// categories were scored), and (when present) the pooled sweep rows.
pub fn report_markdown(
    table: &HeadScoreTable,
    correlation: Option<&CorrelationMatrix>,
    overlap: &OverlapReport,
    sweep: Option<&SweepOutcome>,
) -> String {
    let mut out = String::new();
    out.push_str("# Attention head bias analysis\n\n");
    out.push_str(
        "All head indices are 0-based flat indices: `flat = layer * heads_per_layer + head`.\n\n",
    );

    out.push_str("## Provenance\n\n");
    let h = &table.hashes;
    for (name, value) in [
        ("model", &h.model_hash),
        ("dataset", &h.dataset_hash),
        ("corpus", &h.corpus_hash),
        ("scorer", &h.scorer_hash),
        ("gen_params", &h.gen_params_hash),
    ] {
        out.push_str(&format!("- {name}: `{value}`\n"));
    }

    out.push_str("\n## Baseline\n\n");
    out.push_str(&format!("- perplexity: {}\n", fmt(table.baseline_ppl)));
    for (cat, b) in &table.baseline_bias {
        out.push_str(&format!("- bias[{}]: {}\n", cat, fmt(*b)));
    }

    out.push_str(&format!(
        "\n## Top bias-promoting heads (top {}% by z_bias)\n\n",
        fmt(overlap.top_fraction * 100.0)
    ));
    out.push_str("| category | heads |\n|---|---|\n");
    for (cat, heads) in &overlap.sets {
        out.push_str(&format!("| {} | {} |\n", cat, md_heads(heads)));
    }

    out.push_str("\n## Cross-category overlap\n\n");
    out.push_str("| shared by at least | heads |\n|---|---|\n");
    for (m, heads) in &overlap.shared_by {
        out.push_str(&format!("| {} categories | {} |\n", m, md_heads(heads)));
    }

    out.push_str("\n## Correlation of z_bias between categories\n\n");
    match correlation {
        Some(correlation) => {
            out.push('|');
            for cat in &correlation.categories {
                out.push_str(&format!(" | {cat}"));
            }
            out.push_str(" |\n|---");
            for _ in &correlation.categories {
                out.push_str("|---");
            }
            out.push_str("|\n");
            for (i, cat) in correlation.categories.iter().enumerate() {
                out.push_str(&format!("| {cat}"));
                for j in 0..correlation.len() {
                    match correlation.get(i, j) {
                        Some(r) => out.push_str(&format!(" | {}", fmt(r))),
                        None => out.push_str(" | NA"),
                    }
                }
                out.push_str(" |\n");
            }
        }
        None => {
            out.push_str("Only one category was scored; correlation needs at least two.\n");
        }
    }

    if let Some(sw) = sweep {
        out.push_str(&format!(
            "\n## Pruning sweep (pooled, category {}, gamma {})\n\n",
            sw.category,
            fmt(sw.gamma)
        ));
        out.push_str("| strategy | alpha | ppl | ppl change % | bias | bias change % |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for row in sw.rows.iter().filter(|r| r.seed.is_none()) {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                row.strategy,
                fmt(row.alpha),
                fmt(row.ppl),
                fmt(row.ppl_change_pct),
                fmt(row.bias),
                row.bias_change_pct.map(fmt).unwrap_or_else(|| "NA".to_string())
            ));
        }
    }
    out
}
