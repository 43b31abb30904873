//! CLI contract tests: exit codes, config-file precedence, and the sweep
//! artifact round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fasp")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn fasp(args: &[&str], cache_dir: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .env("FASP_CACHE_DIR", cache_dir)
        .output()
        .expect("binary runs")
}

fn make_model(dir: &Path) -> PathBuf {
    let model = dir.join("model.bin");
    let out = fasp(
        &[
            "make-toy",
            "--out", &model.display().to_string(),
            "--layers", "1",
            "--heads", "2",
            "--d-model", "8",
            "--d-head", "4",
            "--d-ff", "16",
            "--vocab", "245",
            "--max-seq-len", "64",
            "--init-std", "0.5",
            "--seed", "3",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn missing_input_file_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fasp(
        &["eval-ppl", "--model", "/nonexistent/model.bin", "--corpus", "/nonexistent/c.txt"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("/nonexistent/model.bin"),
        "stderr must name the missing path: {stderr}"
    );
}

#[test]
fn unknown_strategy_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let model = make_model(tmp.path());
    let out = fasp(
        &[
            "prune",
            "--model", &model.display().to_string(),
            "--strategy", "chaotic",
            "--alpha", "0.5",
            "--out", &tmp.path().join("p.json").display().to_string(),
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("chaotic"), "stderr must name the bad strategy: {stderr}");
}

#[test]
fn alpha_gamma_conflict_exits_2_with_both_values() {
    let tmp = tempfile::tempdir().unwrap();
    let model = make_model(tmp.path());
    // A table is needed before planning; score only the cheap ppl half by
    // giving a dataset with one tiny category.
    let out = fasp(
        &[
            "score-heads",
            "--model", &model.display().to_string(),
            "--prompts", &data_dir().join("prompts.jsonl").display().to_string(),
            "--lexicon", &data_dir().join("lexicon.tsv").display().to_string(),
            "--corpus", &data_dir().join("corpus-words.txt").display().to_string(),
            "--tokenizer", &data_dir().join("vocab.json").display().to_string(),
            "--category", "religion",
            "--window", "32",
            "--seeds", "1",
            "--max-new", "4",
            "--out", &tmp.path().join("table.json").display().to_string(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = fasp(
        &[
            "prune",
            "--model", &model.display().to_string(),
            "--table", &tmp.path().join("table.json").display().to_string(),
            "--strategy", "fasp",
            "--alpha", "0.9",
            "--gamma", "0.4",
            "--out", &tmp.path().join("p.json").display().to_string(),
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("alpha 0.9") && stderr.contains("gamma"),
        "stderr must state the conflicting alpha and gamma: {stderr}"
    );
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let model = make_model(tmp.path());
    let config = tmp.path().join("config.json");
    std::fs::write(&config, r#"{ "max_new": 3, "temperature": 0.0 }"#).unwrap();

    let model = model.display().to_string();
    let gen = |extra: &[&str]| -> serde_json::Value {
        let out_path = tmp.path().join("gen.json");
        let mut args = vec![
            "generate",
            "--model", &model,
            "--prompt", "hello",
            "--config",
        ];
        let config = config.display().to_string();
        args.push(&config);
        args.extend_from_slice(extra);
        let out_str = out_path.display().to_string();
        args.extend_from_slice(&["--out", &out_str]);
        let out = fasp(&args, tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap()
    };

    // Config beats the built-in default (20).
    let doc = gen(&[]);
    assert_eq!(doc["max_new"], 3);
    assert_eq!(doc["temperature"], 0.0);
    // An explicit flag beats the config.
    let doc = gen(&["--max-new", "5"]);
    assert_eq!(doc["max_new"], 5);
    assert_eq!(doc["temperature"], 0.0);
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let model = make_model(tmp.path());
    let config = tmp.path().join("config.json");
    std::fs::write(&config, r#"{ "max_new_tokens": 3 }"#).unwrap();
    let out = fasp(
        &[
            "generate",
            "--model", &model.display().to_string(),
            "--prompt", "hello",
            "--config", &config.display().to_string(),
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("max_new_tokens"), "stderr must name the unknown key: {stderr}");
}

#[test]
fn sweep_emits_per_seed_and_pooled_rows_for_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let model = make_model(tmp.path());
    let data = data_dir();
    let model = model.display().to_string();
    let table = tmp.path().join("table.json").display().to_string();
    let prompts = data.join("prompts.jsonl").display().to_string();
    let lexicon = data.join("lexicon.tsv").display().to_string();
    let corpus = data.join("corpus-words.txt").display().to_string();
    let vocab = data.join("vocab.json").display().to_string();

    let out = fasp(
        &[
            "score-heads",
            "--model", &model,
            "--prompts", &prompts,
            "--lexicon", &lexicon,
            "--corpus", &corpus,
            "--tokenizer", &vocab,
            "--category", "religion",
            "--window", "32",
            "--seeds", "1,2",
            "--max-new", "6",
            "--out", &table,
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv_path = tmp.path().join("sweep.csv");
    let json_path = tmp.path().join("sweep.json");
    let out = fasp(
        &[
            "sweep",
            "--model", &model,
            "--table", &table,
            "--prompts", &prompts,
            "--lexicon", &lexicon,
            "--corpus", &corpus,
            "--tokenizer", &vocab,
            "--category", "religion",
            "--strategies", "fasp,random",
            "--alphas", "0.5",
            "--window", "32",
            "--seeds", "1,2",
            "--max-new", "6",
            "--out", &csv_path.display().to_string(),
            "--json", &json_path.display().to_string(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    // Header + 2 strategies x 1 alpha x (2 seeds + pooled).
    assert_eq!(rows.len(), 1 + 2 * 3, "unexpected sweep rows:\n{csv}");
    assert!(rows[0].starts_with("strategy,alpha,seed,ppl"), "header: {}", rows[0]);
    assert_eq!(csv.matches(",pooled,").count(), 2, "one pooled row per cell:\n{csv}");

    // The JSON rendering loads back into the report command.
    let report = tmp.path().join("report.md");
    let out = fasp(
        &[
            "report",
            "--table", &table,
            "--sweep-json", &json_path.display().to_string(),
            "--out", &report.display().to_string(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(&report).unwrap();
    assert!(md.contains("Pruning sweep"), "report must embed the sweep section:\n{md}");
}
