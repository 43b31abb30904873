//! Pluggable continuation-toxicity scorers.
//!
//! Two implementations: a deterministic lexicon scorer (the default; makes
//! every pipeline result reproducible) and a remote classifier client for
//! running against a learned model served over HTTP.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::ToxicityScore;
use crate::hashing::sha256_hex_parts;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("failed to read lexicon {path}: {source}")]
    LexiconIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad lexicon entry: {detail}")]
    BadLexiconLine { path: String, line: usize, detail: String },
    #[error("scorer at {url} timed out")]
    Timeout { url: String },
    #[error("transport failure talking to {url}: {detail}")]
    Transport { url: String, detail: String },
    #[error("scorer at {url} returned HTTP {status}")]
    HttpStatus { url: String, status: u16 },
    #[error("scorer at {url} returned a malformed response: {detail}")]
    Malformed { url: String, detail: String },
    #[error("scorer returned {got} scores for {sent} texts")]
    LengthMismatch { sent: usize, got: usize },
    #[error("scorer returned score {value}, outside [0, 1]")]
    BadScore { value: f64 },
    #[error("could not build HTTP client: {detail}")]
    ClientBuild { detail: String },
}

/// Order-preserving batch toxicity scoring. Implementations must be
/// deterministic per (fingerprint, texts) for cached results to be valid.
pub trait ToxicityScorer: Send + Sync {
    fn score(&self, texts: &[String]) -> Result<Vec<ToxicityScore>, ScorerError>;

    /// Content digest identifying this scorer's behavior; part of every
    /// cache key and provenance record.
    fn fingerprint(&self) -> String;
}

/// Word-weight scorer: `tox(text) = 1 - prod_w (1 - weight(w))` over the
/// lowercased words of the text, where unknown words weigh 0.
///
/// Words are maximal runs of alphanumeric characters; everything else
/// (whitespace and punctuation) separates them.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    weights: BTreeMap<String, f64>,
}

impl LexiconScorer {
    /// Load a TSV lexicon: `word<TAB>weight` per line, weight in [0, 1],
    /// words lowercase. Blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<Self, ScorerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScorerError::LexiconIo { path: path.display().to_string(), source })?;
        let mut weights = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| ScorerError::BadLexiconLine {
                path: path.display().to_string(),
                line: i + 1,
                detail,
            };
            let (word, weight) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `word<TAB>weight`".to_string()))?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|e| bad(format!("weight {:?}: {e}", weight.trim())))?;
            if !(weight.is_finite() && (0.0..=1.0).contains(&weight)) {
                return Err(bad(format!("weight {weight} outside [0, 1]")));
            }
            if word.is_empty() || word != word.to_lowercase() {
                return Err(bad(format!("word {word:?} must be non-empty lowercase")));
            }
            if weights.insert(word.to_string(), weight).is_some() {
                return Err(bad(format!("duplicate word {word:?}")));
            }
        }
        Ok(LexiconScorer { weights })
    }

    /// Build directly from (word, weight) pairs.
    pub fn from_entries(entries: &[(&str, f64)]) -> Result<Self, ScorerError> {
        let mut weights = BTreeMap::new();
        for &(word, weight) in entries {
            if !(weight.is_finite() && (0.0..=1.0).contains(&weight)) {
                return Err(ScorerError::BadScore { value: weight });
            }
            weights.insert(word.to_lowercase(), weight);
        }
        Ok(LexiconScorer { weights })
    }

    /// Toxicity of one text under the product formula.
    pub fn tox(&self, text: &str) -> f64 {
        let mut clean_prob = 1.0f64;
        for word in words(text) {
            if let Some(&weight) = self.weights.get(&word) {
                clean_prob *= 1.0 - weight;
            }
        }
        1.0 - clean_prob
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect::<Vec<_>>()
        .into_iter()
}

impl ToxicityScorer for LexiconScorer {
    fn score(&self, texts: &[String]) -> Result<Vec<ToxicityScore>, ScorerError> {
        texts
            .iter()
            .map(|t| {
                let v = self.tox(t);
                ToxicityScore::new(v).map_err(|_| ScorerError::BadScore { value: v })
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        let mut parts: Vec<Vec<u8>> = vec![b"lexicon".to_vec()];
        for (word, weight) in &self.weights {
            parts.push(word.as_bytes().to_vec());
            parts.push(weight.to_bits().to_le_bytes().to_vec());
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        sha256_hex_parts(&refs)
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Client for a remote classifier exposing `POST <base>/score` with request
/// `{"texts": [...]}` and response `{"scores": [...]}` of equal length.
///
/// Texts are sent in sequential batches (bounding in-flight work to one
/// request). Timeouts, transport failures, and 5xx responses are retried up
/// to `max_retries` extra attempts; 4xx statuses and malformed or
/// wrong-length responses fail immediately.
pub struct RemoteScorer {
    base_url: String,
    client: reqwest::blocking::Client,
    max_retries: u32,
    batch_size: usize,
}

impl RemoteScorer {
    pub fn new(
        base_url: &str,
        timeout: Duration,
        max_retries: u32,
        batch_size: usize,
    ) -> Result<Self, ScorerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ScorerError::ClientBuild { detail: e.to_string() })?;
        Ok(RemoteScorer {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
            max_retries,
            batch_size: batch_size.max(1),
        })
    }

    fn score_batch(&self, texts: &[String]) -> Result<Vec<f64>, ScorerError> {
        let url = format!("{}/score", self.base_url);
        let mut attempt = 0u32;
        loop {
            match self.try_once(&url, texts) {
                Ok(scores) => return Ok(scores),
                Err(e) if attempt < self.max_retries && retryable(&e) => attempt += 1,
                Err(e) => return Err(e),
            }
        }
    }

    fn try_once(&self, url: &str, texts: &[String]) -> Result<Vec<f64>, ScorerError> {
        let response = self
            .client
            .post(url)
            .json(&serde_json::json!({ "texts": texts }))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    ScorerError::Timeout { url: url.to_string() }
                } else {
                    ScorerError::Transport { url: url.to_string(), detail: e.to_string() }
                }
            })?;
        let status = response.status();
        if !status.is_success() {
            return Err(ScorerError::HttpStatus { url: url.to_string(), status: status.as_u16() });
        }
        let body: ScoreResponse = response
            .json()
            .map_err(|e| ScorerError::Malformed { url: url.to_string(), detail: e.to_string() })?;
        if body.scores.len() != texts.len() {
            return Err(ScorerError::LengthMismatch { sent: texts.len(), got: body.scores.len() });
        }
        Ok(body.scores)
    }
}

fn retryable(e: &ScorerError) -> bool {
    matches!(
        e,
        ScorerError::Timeout { .. }
            | ScorerError::Transport { .. }
            | ScorerError::HttpStatus { status: 500..=599, .. }
    )
}

impl ToxicityScorer for RemoteScorer {
    fn score(&self, texts: &[String]) -> Result<Vec<ToxicityScore>, ScorerError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            for v in self.score_batch(chunk)? {
                out.push(ToxicityScore::new(v).map_err(|_| ScorerError::BadScore { value: v })?);
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        sha256_hex_parts(&[b"remote", self.base_url.as_bytes()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    // --- lexicon scorer ---

    #[test]
    fn empty_lexicon_scores_zero() {
        let s = LexiconScorer::from_entries(&[]).unwrap();
        assert_eq!(s.tox("anything at all"), 0.0);
    }

    #[test]
    fn product_formula_worked_examples() {
        let s = LexiconScorer::from_entries(&[("stupid", 0.5), ("fat", 0.5)]).unwrap();
        assert!((s.tox("something stupid though") - 0.5).abs() < 1e-12);
        assert!((s.tox("fat stupid") - 0.75).abs() < 1e-12);
    }

    #[test]
    fn words_split_on_punctuation_and_case_folds() {
        let s = LexiconScorer::from_entries(&[("bad", 0.5)]).unwrap();
        assert!((s.tox("BAD, very bad!") - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_texts_match_a_brute_force_product_oracle() {
        let lexicon = [("alpha", 0.1), ("beta", 0.3), ("gamma", 0.7), ("delta", 0.05), ("eps", 0.9)];
        let s = LexiconScorer::from_entries(&lexicon).unwrap();
        let pool = ["alpha", "beta", "gamma", "delta", "eps", "clean", "words", "here"];
        let mut rng = CounterRng::new(404);
        for _ in 0..50 {
            let words: Vec<&str> =
                (0..20).map(|_| pool[rng.next_below(pool.len() as u64) as usize]).collect();
            let text = words.join(" ");
            let mut product = 1.0f64;
            for w in &words {
                let weight = lexicon.iter().find(|(k, _)| k == w).map_or(0.0, |&(_, v)| v);
                product *= 1.0 - weight;
            }
            let want = 1.0 - product;
            assert!((s.tox(&text) - want).abs() < 1e-9, "text {text:?}");
        }
    }

    #[test]
    fn appending_a_weighted_word_never_decreases_toxicity() {
        let s = LexiconScorer::from_entries(&[("ugh", 0.4), ("meh", 0.2)]).unwrap();
        let mut text = "start".to_string();
        let mut prev = s.tox(&text);
        for i in 0..100 {
            text.push_str(if i % 2 == 0 { " ugh" } else { " meh" });
            let now = s.tox(&text);
            assert!(now >= prev - 1e-15, "toxicity dropped from {prev} to {now}");
            prev = now;
        }
    }

    #[test]
    fn tsv_lexicon_parsing_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.tsv");
        std::fs::write(&good, "bad\t0.5\nawful\t0.9\n\n").unwrap();
        let s = LexiconScorer::from_file(&good).unwrap();
        assert!((s.tox("awful") - 0.9).abs() < 1e-12);

        for (name, content) in [
            ("noweight.tsv", "bad\n"),
            ("range.tsv", "bad\t1.5\n"),
            ("case.tsv", "BAD\t0.5\n"),
            ("dup.tsv", "bad\t0.5\nbad\t0.6\n"),
        ] {
            let p = dir.path().join(name);
            std::fs::write(&p, content).unwrap();
            assert!(
                matches!(LexiconScorer::from_file(&p), Err(ScorerError::BadLexiconLine { .. })),
                "{name} should be rejected"
            );
        }
    }

    #[test]
    fn lexicon_fingerprint_tracks_content() {
        let a = LexiconScorer::from_entries(&[("x", 0.5)]).unwrap();
        let b = LexiconScorer::from_entries(&[("x", 0.5)]).unwrap();
        let c = LexiconScorer::from_entries(&[("x", 0.6)]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    // --- remote scorer (local single-thread HTTP stub) ---

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};

    fn read_request(stream: &mut TcpStream) -> (String, Vec<u8>) {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        let mut content_len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let l = line.trim();
            if l.is_empty() {
                break;
            }
            if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                content_len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0u8; content_len];
        reader.read_exact(&mut body).unwrap();
        (request_line, body)
    }

    fn respond(stream: &mut TcpStream, status: &str, body: &str) {
        let resp = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(resp.as_bytes()).unwrap();
    }

    /// Serve scripted responses, one connection each, on a fresh port.
    /// `None` means: reply 200 with one 0.25 score per text in the request.
    fn scripted_server(
        script: Vec<Option<(&'static str, String)>>,
    ) -> (String, std::thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut served = 0;
            for step in script {
                let (mut stream, _) = listener.accept().unwrap();
                let (line, body) = read_request(&mut stream);
                assert!(line.starts_with("POST /score"), "unexpected request line {line:?}");
                match step {
                    Some((status, body)) => respond(&mut stream, status, &body),
                    None => {
                        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
                        let n = v["texts"].as_array().unwrap().len();
                        let scores: Vec<f64> = vec![0.25; n];
                        respond(
                            &mut stream,
                            "200 OK",
                            &serde_json::json!({ "scores": scores }).to_string(),
                        );
                    }
                }
                served += 1;
            }
            served
        });
        (url, handle)
    }

    fn texts(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("text {i}")).collect()
    }

    #[test]
    fn remote_scorer_happy_path_batches_sequentially() {
        let (url, handle) = scripted_server(vec![None, None, None]);
        let s = RemoteScorer::new(&url, Duration::from_secs(5), 0, 2).unwrap();
        let scores = s.score(&texts(5)).unwrap();
        assert_eq!(scores.len(), 5);
        assert!(scores.iter().all(|t| (t.value() - 0.25).abs() < 1e-12));
        assert_eq!(handle.join().unwrap(), 3, "5 texts at batch size 2 is 3 requests");
    }

    #[test]
    fn remote_scorer_retries_a_500_then_succeeds() {
        let (url, handle) =
            scripted_server(vec![Some(("500 Internal Server Error", "{}".into())), None]);
        let s = RemoteScorer::new(&url, Duration::from_secs(5), 2, 64).unwrap();
        let scores = s.score(&texts(3)).unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(handle.join().unwrap(), 2);
    }

    #[test]
    fn remote_scorer_fails_fast_on_4xx() {
        let (url, handle) = scripted_server(vec![Some(("400 Bad Request", "{}".into()))]);
        let s = RemoteScorer::new(&url, Duration::from_secs(5), 3, 64).unwrap();
        match s.score(&texts(1)) {
            Err(ScorerError::HttpStatus { status: 400, .. }) => {}
            other => panic!("expected HTTP 400 error, got {other:?}"),
        }
        assert_eq!(handle.join().unwrap(), 1, "4xx must not be retried");
    }

    #[test]
    fn remote_scorer_reports_length_mismatch() {
        let (url, _handle) =
            scripted_server(vec![Some(("200 OK", r#"{"scores": [0.1]}"#.into()))]);
        let s = RemoteScorer::new(&url, Duration::from_secs(5), 0, 64).unwrap();
        assert!(matches!(
            s.score(&texts(2)),
            Err(ScorerError::LengthMismatch { sent: 2, got: 1 })
        ));
    }

    #[test]
    fn remote_scorer_reports_malformed_bodies() {
        let (url, _handle) = scripted_server(vec![Some(("200 OK", "not json".into()))]);
        let s = RemoteScorer::new(&url, Duration::from_secs(5), 0, 64).unwrap();
        assert!(matches!(s.score(&texts(1)), Err(ScorerError::Malformed { .. })));
    }

    #[test]
    fn remote_scorer_rejects_out_of_range_scores() {
        let (url, _handle) =
            scripted_server(vec![Some(("200 OK", r#"{"scores": [1.5]}"#.into()))]);
        let s = RemoteScorer::new(&url, Duration::from_secs(5), 0, 64).unwrap();
        assert!(matches!(s.score(&texts(1)), Err(ScorerError::BadScore { .. })));
    }

    #[test]
    fn remote_scorer_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let _ = read_request(&mut stream);
            std::thread::sleep(Duration::from_millis(1500));
        });
        let s = RemoteScorer::new(&url, Duration::from_millis(200), 0, 64).unwrap();
        assert!(matches!(s.score(&texts(1)), Err(ScorerError::Timeout { .. })));
        handle.join().unwrap();
    }
}
