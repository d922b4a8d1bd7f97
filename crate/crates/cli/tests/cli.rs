use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use reghorizon::horizon::{planted_records, HyperPoint, RegressionFit, SweepAxis, SweepSpec};
use reghorizon::trainer::{write_records, RunRecord};
use reghorizon_cli::*;
use serde_json::{json, Value};

fn tiny_config(dir: &Path) -> Value {
    json!({
        "corpus": {
            "vocab_size": 11, "min_len": 2, "max_len": 4, "size": 120,
            "frames_per_token": 2, "frame_dim": 4, "noise_sigma": 0.1,
            "task": "SHIFT_MAP", "seed": 5
        },
        "model": {
            "vocab_size": 11, "d_model": 8, "n_heads": 2, "enc_layers": 1, "dec_layers": 1,
            "ffn_dim": 16, "frame_dim": 4
        },
        "train": { "max_steps": 12, "eval_every": 4, "warmup_steps": 4, "max_tokens": 96 },
        "output_dir": dir
    })
}

fn load(dir: &Path, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_value(tiny_config(dir), &o, None).unwrap()
}

fn write_config(dir: &Path, value: &Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    p
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reghorizon"));
    c.env_remove(SEED_ENV);
    c
}

#[test]
fn overrides_follow_dotted_paths() {
    let mut v = json!({"train": {"dropout": 0.1}});
    apply_override(&mut v, "train.dropout=0.25").unwrap();
    apply_override(&mut v, "train.weights.rd_tap=SOFTMAX").unwrap();
    apply_override(&mut v, "sweep.seeds=[1,2]").unwrap();
    assert_eq!(v["train"]["dropout"], json!(0.25));
    assert_eq!(v["train"]["weights"]["rd_tap"], json!("SOFTMAX"));
    assert_eq!(v["sweep"]["seeds"], json!([1, 2]));
    for bad in ["train.dropout", "train..x=1", "train.dropout.x=1"] {
        assert!(apply_override(&mut v, bad).is_err(), "{bad}");
    }
}

#[test]
fn config_rejects_unknown_and_inconsistent_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_config(tmp.path());
    v["trian"] = json!({});
    assert!(ExperimentConfig::from_value(v, &[], None).is_err());
    let bad = ["model.vocab_size=12".to_string()];
    assert!(ExperimentConfig::from_value(tiny_config(tmp.path()), &bad, None).is_err());
    let bad = ["train.dropout=1.5".to_string()];
    assert!(ExperimentConfig::from_value(tiny_config(tmp.path()), &bad, None).is_err());
}

#[test]
fn global_seed_replaces_every_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_config(tmp.path());
    v["sweep"] = json!({"axes": {"dropout": [0.1]}, "seeds": [0, 1, 2]});
    let c = ExperimentConfig::from_value(v, &[], Some(42)).unwrap();
    assert_eq!(c.corpus.seed, 42);
    assert_eq!(c.train.seed, 42);
    assert_eq!(c.sweep.unwrap().seeds, vec![42]);
}

#[test]
fn gen_is_reproducible_and_hashes_the_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ga = cmd_gen(&load(&a, &[])).unwrap();
    let gb = cmd_gen(&load(&b, &["train.seed=9"])).unwrap();
    let bytes = fs::read(&ga.corpus).unwrap();
    assert_eq!(bytes, fs::read(&gb.corpus).unwrap());
    assert_eq!(ga.manifest.spec_hash, gb.manifest.spec_hash);
    assert_eq!(bytes.iter().filter(|c| **c == b'\n').count(), 120);
    assert_eq!(ga.manifest.lines, 120);

    let gc = cmd_gen(&load(&tmp.path().join("c"), &["corpus.noise_sigma=0.2"])).unwrap();
    assert_ne!(ga.manifest.spec_hash, gc.manifest.spec_hash);
    let manifest: Value =
        serde_json::from_slice(&fs::read(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["spec_hash"], json!(ga.manifest.spec_hash));
}

#[test]
fn train_writes_identical_records_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = cmd_train(&load(&a, &[])).unwrap();
    cmd_train(&load(&b, &[])).unwrap();
    let run_a = fs::read(a.join(RUN_FILE)).unwrap();
    assert_eq!(run_a, fs::read(b.join(RUN_FILE)).unwrap());
    assert!(!ra.record.failed);

    let v: Value = serde_json::from_slice(&run_a).unwrap();
    for key in [
        "alpha_cr",
        "alpha_rd",
        "alpha_t",
        "dropout",
        "dev_metric",
        "test_metric",
        "seed",
        "failed",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let ckpt: Value = serde_json::from_slice(&fs::read(a.join(CHECKPOINT_FILE)).unwrap()).unwrap();
    assert_eq!(ckpt["config_hash"], json!(ra.record.config_hash));
    let scores = read_scores(&a.join(DEV_SCORES_FILE)).unwrap();
    assert!(!scores.is_empty() && scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn train_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(&tmp.path().join("ok")));
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));

    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args([
            "--set",
            "train.max_lr=1e300",
            "--set",
            "train.warmup_steps=1",
        ])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let rec: RunRecord =
        serde_json::from_slice(&fs::read(tmp.path().join("ok").join(RUN_FILE)).unwrap()).unwrap();
    assert!(rec.failed);

    let st = bin()
        .args(["train", "--config", "/nonexistent.json"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
}

fn sweep_config(dir: &Path) -> ExperimentConfig {
    let mut c = load(dir, &["train.max_steps=6", "train.eval_every=3"]);
    let mut sweep = SweepSpec::default();
    sweep.axes.insert(SweepAxis::AlphaT, vec![1.0, 0.0]);
    sweep.axes.insert(SweepAxis::Dropout, vec![0.1, 0.2]);
    sweep.base_weights.alpha_rd = 1.0;
    sweep.base_weights.alpha_cr = 0.5;
    c.sweep = Some(sweep);
    c
}

#[test]
fn sweep_counts_resumes_and_ignores_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let one = sweep_config(&tmp.path().join("one"));
    let out = cmd_sweep(&one, 1).unwrap();
    assert_eq!((out.total, out.executed, out.skipped), (4, 4, 0));
    let full = fs::read_to_string(&out.results).unwrap();
    assert_eq!(full.lines().count(), 4);

    let four = sweep_config(&tmp.path().join("four"));
    let out4 = cmd_sweep(&four, 4).unwrap();
    assert_eq!(fs::read_to_string(&out4.results).unwrap(), full);

    // Drop one finished run and leave a torn line behind.
    let lines: Vec<&str> = full.lines().collect();
    let torn = format!(
        "{}\n{}\n{}\n{}",
        lines[0],
        lines[1],
        lines[3],
        &lines[2][..20]
    );
    fs::write(&out.results, torn).unwrap();
    let again = cmd_sweep(&one, 2).unwrap();
    assert_eq!((again.total, again.executed, again.skipped), (4, 1, 3));
    assert_eq!(fs::read_to_string(&out.results).unwrap(), full);

    let idle = cmd_sweep(&one, 1).unwrap();
    assert_eq!(idle.executed, 0);
}

#[test]
fn sweep_needs_a_grid() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(cmd_sweep(&load(tmp.path(), &[]), 1).is_err());
}

fn planted_file(dir: &Path, fit: &RegressionFit) -> (std::path::PathBuf, Vec<RunRecord>) {
    let records = planted_records(fit, &SweepSpec::paper_grid().points().unwrap(), 0.0, 0);
    let path = dir.join("results.jsonl");
    let mut bytes = Vec::new();
    write_records(&records, &mut bytes).unwrap();
    fs::write(&path, bytes).unwrap();
    (path, records)
}

#[test]
fn analyze_recovers_planted_coefficients() {
    let tmp = tempfile::tempdir().unwrap();
    let planted = RegressionFit::from_betas(0.3, 0.12, -0.6, 8.0, 30.0);
    let (path, records) = planted_file(tmp.path(), &planted);
    let out_dir = tmp.path().join("analysis");
    let out = cmd_analyze(&path, &out_dir, &analysis_base(None)).unwrap();
    let r = &out.report;
    for (got, want) in [
        (r.beta_cr, planted.beta_cr),
        (r.beta_rd, planted.beta_rd),
        (r.beta_t, planted.beta_t),
        (r.beta_do, planted.beta_do),
        (r.beta_f, planted.beta_f),
        (r.beta_b, planted.beta_b),
    ] {
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }

    let report: Value =
        serde_json::from_slice(&fs::read(out_dir.join(REPORT_FILE)).unwrap()).unwrap();
    let mut keys: Vec<&str> = report
        .as_object()
        .unwrap()
        .keys()
        .map(|k| k.as_str())
        .collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "beta_B",
            "beta_cr",
            "beta_do",
            "beta_f",
            "beta_rd",
            "beta_t",
            "n_points",
            "residual_rms"
        ]
    );
    let csv = fs::read_to_string(out_dir.join(COLLAPSE_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some("R,metric,family,dropout"));
    assert_eq!(csv.lines().count() - 1, records.len());
    let meta: Value =
        serde_json::from_slice(&fs::read(out_dir.join(REPORT_META_FILE)).unwrap()).unwrap();
    assert_eq!(meta["input_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn analyze_exit_code_on_too_few_points() {
    let tmp = tempfile::tempdir().unwrap();
    let fit = RegressionFit::from_betas(0.3, 0.12, -0.6, 8.0, 30.0);
    let points: Vec<HyperPoint> = SweepSpec::paper_grid()
        .points()
        .unwrap()
        .into_iter()
        .take(5)
        .collect();
    let mut bytes = Vec::new();
    write_records(&planted_records(&fit, &points, 0.0, 0), &mut bytes).unwrap();
    let path = tmp.path().join("few.jsonl");
    fs::write(&path, bytes).unwrap();
    let out = bin().arg("analyze").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("got "), "{err}");
}

fn scores_file(dir: &Path, name: &str, scores: &[f64]) -> std::path::PathBuf {
    let p = dir.join(name);
    let body: String = scores
        .iter()
        .map(|s| format!("{{\"score\": {s}}}\n"))
        .collect();
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn bootstrap_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let mixed: Vec<f64> = (0..40).map(|i| (i % 7) as f64 / 7.0).collect();
    let a = scores_file(tmp.path(), "a.jsonl", &mixed);
    let tie = cmd_bootstrap(&a, &a, 1000, 3).unwrap();
    assert_eq!(tie.p_value, 1.0);

    let ones = scores_file(tmp.path(), "ones.jsonl", &[1.0; 40]);
    let zeros = scores_file(tmp.path(), "zeros.jsonl", &[0.0; 40]);
    assert_eq!(cmd_bootstrap(&ones, &zeros, 1000, 3).unwrap().p_value, 0.0);

    let shifted: Vec<f64> = mixed
        .iter()
        .enumerate()
        .map(|(i, s)| s + if i % 3 == 0 { 0.1 } else { -0.05 })
        .collect();
    let b = scores_file(tmp.path(), "b.jsonl", &shifted);
    let run = |seed: &str| {
        let out = bin()
            .arg("bootstrap")
            .arg(&a)
            .arg(&b)
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        out.stdout
    };
    assert_eq!(run("11"), run("11"));
}

#[test]
fn checkgrad_passes_and_catches_the_fixture() {
    let start = Instant::now();
    let out = bin().arg("checkgrad").output().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("total_loss/Softmax/Kl"));
    assert!(table.contains("injected_bug") && table.contains("detected"));
    assert!(!table.contains("FAIL"));
    assert!(elapsed < 30.0, "{elapsed}s");
}
