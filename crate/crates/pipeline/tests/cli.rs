//! The `memecap` binary: exit codes, evaluation of precomputed captions,
//! report comparison, annotation export and the grid search.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memecap::{Config, Stage, Workspace};
use memecap_annotate::queue::QueueConfig;
use memecap_annotate::{AnnotationResponse, AnnotationSet, Service, ServiceConfig, TaskKind, Winner};

const TINY: &str = r#"
[stage.ingest]
synthetic_size = 32

[stage.align]
epochs = 2

[stage.sft]
epochs = 3

[stage.candidates]
k = 3

[stage.annotate-serve]
fraction = 1.0

[stage.train-reward]
steps = 20

[stage.rl]
steps = 4
"#;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("memecap.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn memecap(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memecap"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("MEMECAP_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) {
    let out = memecap(config, args);
    assert!(out.status.success(), "memecap {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn artifacts(config: &Path) -> PathBuf {
    config.parent().unwrap().join("artifacts")
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    let out = memecap(&cfg, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));

    let out = memecap(&cfg, &["rl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-reward"));

    let bad = write_config(dir.path(), "[stage.rl]\nw1 = 0.0\nw2 = 0.0\n");
    assert_eq!(memecap(&bad, &["ingest"]).status.code(), Some(1));
    let unknown_key = write_config(dir.path(), "[stage.sft]\nlamda_g = 0.3\n");
    assert_eq!(memecap(&unknown_key, &["ingest"]).status.code(), Some(1));
}

fn evaluation_config(dir: &Path, extra: &str) -> PathBuf {
    for f in ["captions.jsonl", "human_scores.jsonl"] {
        std::fs::copy(fixture(f), dir.join(f)).unwrap();
    }
    write_config(
        dir,
        &format!("{extra}\n[stage.evaluate]\ncaptions = \"captions.jsonl\"\nhuman_scores = \"human_scores.jsonl\"\n"),
    )
}

fn summary_row(csv: &str, group: &str) -> Vec<String> {
    csv.lines().find(|l| l.starts_with(&format!("{group},"))).unwrap().split(',').map(String::from).collect()
}

#[test]
fn evaluate_scores_shipped_captions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = evaluation_config(dir.path(), "");
    ok(&cfg, &["ingest"]);
    ok(&cfg, &["evaluate"]);
    let out = artifacts(&cfg).join("evaluate");

    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["group", "count", "Info", "Rele", "Crea", "Humo", "HAverage", "BLEU", "ROUGE", "CIDEr", "METEOR", "MAverage", "Average", "config_hash"]
    );
    let all = summary_row(&csv, "all");
    assert_eq!(all[1], "8");

    // per-meme means of the 1-5 ratings on the 0-100 scale, then the corpus mean
    let mut per_meme: std::collections::BTreeMap<String, Vec<[f64; 4]>> = Default::default();
    for line in std::fs::read_to_string(fixture("human_scores.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let s = ["informativeness", "relevance", "creativity", "humor"].map(|k| v[k].as_f64().unwrap() * 20.0);
        per_meme.entry(v["meme_id"].as_str().unwrap().to_string()).or_default().push(s);
    }
    let means: Vec<[f64; 4]> =
        per_meme.values().map(|r| std::array::from_fn(|k| r.iter().map(|s| s[k]).sum::<f64>() / r.len() as f64)).collect();
    let h_average = means.iter().map(|m| m.iter().sum::<f64>() / 4.0).sum::<f64>() / means.len() as f64;
    assert!((all[6].parse::<f64>().unwrap() - h_average).abs() <= 0.005 + 1e-9, "{} vs {h_average}", all[6]);
    let m_average: f64 = all[11].parse().unwrap();
    assert!((all[12].parse::<f64>().unwrap() - (h_average + m_average) / 2.0).abs() <= 0.01);

    let report = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(first["meme_id"], "meme-0024");
    assert_eq!(first["auto"]["bleu"], 100.0);
    let last: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert_eq!(last["config_hash"].as_str().unwrap(), all[13]);
}

#[test]
fn compare_needs_matching_configs_or_force() {
    let a = tempfile::tempdir().unwrap();
    let cfg_a = evaluation_config(a.path(), "");
    ok(&cfg_a, &["ingest"]);
    ok(&cfg_a, &["evaluate"]);
    let theirs = artifacts(&cfg_a).join("evaluate");
    let theirs = theirs.to_str().unwrap();

    // same settings elsewhere: comparable, every delta zero
    let b = tempfile::tempdir().unwrap();
    let cfg_b = evaluation_config(b.path(), "");
    ok(&cfg_b, &["ingest"]);
    ok(&cfg_b, &["evaluate", "--compare", theirs]);
    let csv = std::fs::read_to_string(artifacts(&cfg_b).join("evaluate/comparison.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("Average,")));
    for line in csv.lines().skip(1).filter(|l| !l.starts_with("config_hash")) {
        assert_eq!(line.rsplit(',').next().unwrap(), "0.00", "{line}");
    }

    let c = tempfile::tempdir().unwrap();
    let cfg_c = evaluation_config(c.path(), "[stage.rl]\nw1 = 0.5\nw2 = 0.5\n");
    ok(&cfg_c, &["ingest"]);
    let out = memecap(&cfg_c, &["evaluate", "--compare", theirs]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert!(!artifacts(&cfg_c).join("evaluate/comparison.csv").exists());
    ok(&cfg_c, &["evaluate", "--compare", theirs, "--force"]);
    assert!(artifacts(&cfg_c).join("evaluate/comparison.csv").exists());
}

#[test]
fn annotation_export_feeds_reward_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for stage in ["ingest", "segment", "augment", "align", "sft", "candidates"] {
        ok(&cfg, &[stage]);
    }
    ok(&cfg, &["annotate-serve", "--export-only"]);
    let serve = artifacts(&cfg).join("annotate-serve");
    assert_eq!(std::fs::read_to_string(serve.join("preferences.jsonl")).unwrap().trim(), "");

    // three annotators who always prefer the first caption shown, and rate alike
    let config = Config::load(&cfg).unwrap();
    let ws = Workspace::new(config.clone(), 1);
    let mut sets: Vec<AnnotationSet> =
        serde_json::from_str(&std::fs::read_to_string(artifacts(&cfg).join("candidates/annotation_sets.json")).unwrap()).unwrap();
    for s in sets.iter_mut() {
        s.image = ws.root().join(&s.image);
    }
    let a = &config.stage.annotate;
    let service_cfg = ServiceConfig {
        annotators: a.annotators.clone(),
        queue: QueueConfig { fraction: a.fraction, seed: ws.seed_for(Stage::AnnotateServe), rubric: a.rubric },
        min_annotators: a.min_annotators,
        ..ServiceConfig::default()
    };
    {
        let service = Service::open(&sets, &service_cfg, serve.join("responses.jsonl")).unwrap();
        for who in &a.annotators {
            while let Some(task) = service.next_task(who).unwrap() {
                let (winner, scores) = match task.kind {
                    TaskKind::Pair => (Some(Winner::First), None),
                    _ => (None, Some([4, 3, 3, 2])),
                };
                service
                    .submit(AnnotationResponse { task_id: task.id, annotator_id: who.clone(), winner, scores, timestamp: None })
                    .unwrap();
            }
        }
    }
    ok(&cfg, &["annotate-serve", "--export-only"]);
    let exported = std::fs::read_to_string(serve.join("preferences.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = exported.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r["source"] == "human" && r["agreement"].as_f64().unwrap() > 0.7));
    let rubric: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(serve.join("rubric.json")).unwrap()).unwrap();
    let candidates: usize = sets.iter().map(|s| s.candidates.len()).sum();
    assert_eq!(rubric.as_array().unwrap().len(), candidates);

    ok(&cfg, &["train-reward"]);
    let used = std::fs::read_to_string(artifacts(&cfg).join("train-reward/preferences.jsonl")).unwrap();
    assert!(used.contains("\"fused\""), "{used}");
    let manifest = std::fs::read_to_string(artifacts(&cfg).join("train-reward/run.json")).unwrap();
    assert!(manifest.contains("annotate-serve/preferences.jsonl"));
}

#[test]
fn grid_search_over_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{TINY}\n[grid]\nlambdas = [[0.4, 0.2, 0.4], [0.6, 0.2, 0.2]]\nrl_weights = [[0.4, 0.6]]\nobjective = \"MAverage\"\n"
    );
    let cfg = write_config(dir.path(), &text);
    for stage in ["ingest", "segment", "augment", "align"] {
        ok(&cfg, &[stage]);
    }
    let out = memecap(&cfg, &["grid-search"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = artifacts(&cfg).join("grid");
    let csv = std::fs::read_to_string(grid.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",true")).count(), 1);
    let best: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(grid.join("best.json")).unwrap()).unwrap();
    let values: Vec<f64> = rows.iter().map(|r| r.split(',').nth(5).unwrap().parse().unwrap()).collect();
    let top = values.iter().copied().fold(f64::MIN, f64::max);
    assert!((best["value"].as_f64().unwrap() - top).abs() < 1e-4);
    for l in 0..2 {
        assert!(grid.join(format!("l{l}/sft/decoder.blob")).exists());
        assert!(grid.join(format!("l{l}-w0/evaluate/report.jsonl")).exists());
    }

    // the same seed selects the same point with the same table
    std::fs::remove_dir_all(&grid).unwrap();
    ok(&cfg, &["grid-search"]);
    assert_eq!(std::fs::read_to_string(grid.join("results.csv")).unwrap(), csv);
}
