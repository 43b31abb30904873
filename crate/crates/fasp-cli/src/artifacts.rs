//! Output documents and provenance hashing.
//!
//! Every artifact embeds content hashes of the inputs that produced it, so
//! results can be traced to an exact (model, dataset, corpus, scorer,
//! generation-parameter) combination. Artifacts are byte-deterministic:
//! rerunning a command with identical inputs rewrites identical bytes.

use std::path::Path;

use serde::Serialize;

use fasp::bias_eval::{BiasReport, GenParams};
use fasp::hashing::{sha256_hex, sha256_hex_parts};
use fasp::head_scoring::ProvenanceHashes;
use fasp::pruning::{PruningPlan, SweepOutcome};

use crate::CliError;

/// Hash of a raw input file.
pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = read_input(path)?;
    Ok(sha256_hex(&bytes))
}

/// Read an input file, mapping failure to a usage error naming the path.
pub fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read input file {}: {e}", path.display())))
}

/// Hash of the prompt dataset combined with how it was split.
pub fn dataset_hash(prompt_bytes: &[u8], split: &str, val_ratio: f64, split_seed: u64) -> String {
    let desc = format!("split={split} val_ratio={val_ratio} split_seed={split_seed}");
    sha256_hex_parts(&[b"prompts", prompt_bytes, desc.as_bytes()])
}

/// Hash of the perplexity corpus combined with tokenizer and window.
pub fn corpus_hash(corpus_bytes: &[u8], tokenizer_tag: &str, window: usize) -> String {
    let desc = format!("tokenizer={tokenizer_tag} window={window}");
    sha256_hex_parts(&[b"corpus", corpus_bytes, desc.as_bytes()])
}

/// Hash of the generation parameters and tokenizer.
pub fn gen_params_hash(gp: &GenParams, tokenizer_tag: &str) -> String {
    let gp_json = serde_json::to_vec(gp).expect("generation parameters serialize");
    sha256_hex_parts(&[b"gen_params", gp_json.as_slice(), tokenizer_tag.as_bytes()])
}

/// Provenance for single-purpose artifacts; unused components are omitted
/// from the JSON rather than filled with placeholders.
#[derive(Debug, Clone, Serialize)]
pub struct DocProvenance {
    pub model_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_params_hash: Option<String>,
}

impl DocProvenance {
    pub fn model_only(model_hash: String) -> Self {
        DocProvenance {
            model_hash,
            dataset_hash: None,
            corpus_hash: None,
            scorer_hash: None,
            gen_params_hash: None,
        }
    }
}

impl From<ProvenanceHashes> for DocProvenance {
    fn from(h: ProvenanceHashes) -> Self {
        DocProvenance {
            model_hash: h.model_hash,
            dataset_hash: Some(h.dataset_hash),
            corpus_hash: Some(h.corpus_hash),
            scorer_hash: Some(h.scorer_hash),
            gen_params_hash: Some(h.gen_params_hash),
        }
    }
}

#[derive(Serialize)]
pub struct PplDocument {
    pub provenance: DocProvenance,
    pub window: usize,
    pub ppl: f64,
    pub mean_nll: f64,
    pub total_tokens: usize,
}

#[derive(Serialize)]
pub struct SeedBias {
    pub seed: u64,
    #[serde(flatten)]
    pub report: BiasReport,
}

#[derive(Serialize)]
pub struct BiasDocument {
    pub provenance: DocProvenance,
    pub split: String,
    pub pooled: BiasReport,
    pub per_seed: Vec<SeedBias>,
}

#[derive(Serialize)]
pub struct GenerateDocument {
    pub provenance: DocProvenance,
    pub prompt: String,
    pub temperature: f64,
    pub seed: u64,
    pub max_new: usize,
    pub tokens: Vec<u32>,
    pub text: String,
}

#[derive(Serialize)]
pub struct PlanDocument {
    pub provenance: DocProvenance,
    #[serde(flatten)]
    pub plan: PruningPlan,
}

#[derive(Serialize)]
pub struct SweepDocument {
    pub provenance: ProvenanceHashes,
    #[serde(flatten)]
    pub outcome: SweepOutcome,
}

/// Write an artifact, creating parent directories as needed.
pub fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| {
            CliError::compute(format!("cannot create directory {}: {e}", parent.display()))
        })?;
    }
    std::fs::write(path, content)
        .map_err(|e| CliError::compute(format!("cannot write {}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Write a JSON artifact (pretty-printed, trailing newline).
pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::compute(format!("cannot serialize artifact: {e}")))?;
    s.push('\n');
    write_text(path, &s)
}
