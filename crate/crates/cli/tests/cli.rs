use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selftrain"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        let o = run(&[
            "synth",
            "--counts",
            "60,60,60",
            "--words-per-class",
            "40",
            "--noise",
            "0.05",
            "--seed",
            "3",
            "--out",
            corpus.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        let text = format!("seeds = [1]\nn_shot = 5\n\n[data]\ntrain = \"corpus.jsonl\"\n\n{body}");
        fs::write(&p, text).unwrap();
        p
    }

    /// A by-id fixture answering every corpus id with its gold label.
    fn perfect_fixture(&self, suffix: &str) -> PathBuf {
        let text = fs::read_to_string(self.path("corpus.jsonl")).unwrap();
        let mut out = String::new();
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            let entry = serde_json::json!({
                "match": {"mode": "by_id", "key": v["id"]},
                "response": format!("{}{suffix}", v["label"].as_str().unwrap()),
            });
            out.push_str(&entry.to_string());
            out.push('\n');
        }
        let p = self.path("fixture.jsonl");
        fs::write(&p, out).unwrap();
        p
    }
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

#[test]
fn train_writes_artifacts_and_is_repeatable() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let mut outputs = Vec::new();
    for out in ["a", "b"] {
        let out = f.path(out);
        let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let run_dir = out.join("seed-1");
        for file in ["metrics.json", "model.json", "config.toml", "seeds.json"] {
            assert!(run_dir.join(file).is_file(), "{file}");
        }
        outputs.push(fs::read(run_dir.join("metrics.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn missing_dataset_is_a_config_error() {
    let f = Fixture::new();
    let p = f.path("bad.toml");
    fs::write(&p, "[data]\ntrain = \"nope.jsonl\"\n").unwrap();
    let o = run(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.jsonl"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = Fixture::new();
    let p = f.config("c.toml", "[strategy]\nstrategy = \"conf_threshold\"\nthreshold = 0.9\n");
    let o = run(&["selftrain", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_data_is_a_data_error() {
    let f = Fixture::new();
    fs::write(f.path("corpus.jsonl"), "{\"text\": \"fine\", \"label\": \"positive\"}\nnot json\n").unwrap();
    let cfg = f.config("c.toml", "");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", f.path("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn random_strategy_runs_to_its_cap() {
    let f = Fixture::new();
    let cfg = f.config(
        "c.toml",
        "[strategy]\nstrategy = \"random\"\nb = 20\n\n[termination]\nmax_iterations = 3\n",
    );
    let out = f.path("o");
    let o = run(&["selftrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = fs::read_to_string(out.join("seed-1/history.jsonl")).unwrap();
    let recs: Vec<Value> = hist.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!recs.is_empty() && recs.len() <= 3);
    assert!(recs.iter().all(|r| r["num_selected"] == 20));
}

#[test]
fn soft_label_keeps_pool_size() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "[strategy]\nstrategy = \"soft_label\"\n\n[termination]\nmax_iterations = 2\n");
    let out = f.path("o");
    let o = run(&["selftrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = fs::read_to_string(out.join("seed-1/history.jsonl")).unwrap();
    let recs: Vec<Value> = hist.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let pool = recs[0]["pool_size_after"].clone();
    assert!(recs.iter().all(|r| r["soft"] == true && r["pool_size_after"] == pool));
    assert!(recs.iter().all(|r| r["num_selected"] == pool));
}

#[test]
fn three_seeds_produce_three_runs_and_an_aggregate() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let out = f.path("o");
    let o = run(&[
        "selftrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("seeds = [1]", "seeds = [1, 2, 3]")).unwrap();
    let o = run(&["selftrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f1s: Vec<f64> = (1..=3)
        .map(|s| json(&out.join(format!("seed-{s}/metrics.json")))["macro_f1"].as_f64().unwrap())
        .collect();
    let agg = json(&out.join("aggregate.json"));
    let mean = f1s.iter().sum::<f64>() / 3.0;
    assert!((agg["macro_f1"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(agg["macro_f1"]["n"], 3);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let out = f.path("o");
    assert!(run(&["selftrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let resolved = out.join("seed-1/config.toml");
    let again = f.path("again");
    let o = run(&["selftrain", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["metrics.json", "history.jsonl", "model.json"] {
        assert_eq!(
            fs::read(out.join("seed-1").join(file)).unwrap(),
            fs::read(again.join("seed-1").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn sub_mode_with_a_perfect_script() {
    let f = Fixture::new();
    let fixture = f.perfect_fixture("");
    let cfg = f.config("c.toml", "");
    let out = f.path("o");
    let o = run(&[
        "llm-label",
        "--mode",
        "sub",
        "--fixtures",
        fixture.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out.join("seed-1/metrics.json"))["accuracy"], 1.0);
    let records = fs::read_to_string(out.join("seed-1/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 36);
}

#[test]
fn obj_conf_score_labels_the_pool() {
    let f = Fixture::new();
    let fixture = f.perfect_fixture(" | score: 0.9");
    let cfg = f.config("c.toml", "");
    let out = f.path("o");
    let o = run(&[
        "llm-label",
        "--mode",
        "obj-conf-score",
        "--threshold",
        "0.8",
        "--fixtures",
        fixture.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&out.join("seed-1/metrics.json"));
    assert_eq!(m["labeling_accuracy"], 1.0);
    assert!(m["macro_f1"].as_f64().unwrap() > 0.9);
}

#[test]
fn llm_without_source_is_a_config_error() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let o = run(&["llm-label", "--mode", "obj", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unreachable_endpoint_is_an_llm_error() {
    let f = Fixture::new();
    let cfg = f.config(
        "c.toml",
        "[llm]\nmode = \"obj\"\n\n[llm.client]\nmax_retries = 0\ntimeout_ms = 2000\n",
    );
    let o = run(&[
        "llm-label",
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        f.path("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn score_sweep_writes_three_series_and_rerenders_identically() {
    let f = Fixture::new();
    let fixture = f.perfect_fixture(" | score: 0.9");
    let cfg = f.config("c.toml", &format!("[llm]\nmode = \"obj-conf-score\"\nthreshold = 0.5\nfixtures = \"{}\"\n", fixture.display()));
    let out = f.path("sweep");
    let o = run(&[
        "sweep",
        "--axis",
        "score_threshold",
        "--grid",
        "0,0.85,0.95",
        "--seeds",
        "1,2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plot = json(&out.join("plotdata.json"));
    assert_eq!(plot["x"].as_array().unwrap().len(), 3);
    for series in ["bars", "pseudo_label_accuracy", "test_macro_f1"] {
        assert_eq!(plot[series].as_array().unwrap().len(), 3, "{series}");
    }
    assert_eq!(plot["bars"][2], 0.0);
    assert!(plot["bars"][0].as_f64().unwrap() > 0.0);

    let again = f.path("report");
    let o = run(&[
        "report",
        "--input",
        out.join("sweep.json").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["sweep.tsv", "sweep.json", "plotdata.json"] {
        assert_eq!(fs::read(out.join(file)).unwrap(), fs::read(again.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn evaluate_scores_a_saved_model() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let out = f.path("o");
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let eval_out = f.path("eval");
    let o = run(&[
        "evaluate",
        "--model",
        out.join("seed-1/model.json").to_str().unwrap(),
        "--data",
        f.path("corpus.jsonl").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&eval_out.join("metrics.json"))["n"], 180);
}
