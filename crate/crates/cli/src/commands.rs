use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use reghorizon::data::{generate, write_jsonl, CorpusSpec};
use reghorizon::horizon::{
    aggregate, collapse_export, expand_grid, fit_regression, over_regularized, paired_bootstrap,
    write_collapse_csv, CollapseRow, FitReport, HyperPoint, RegressionFit,
};
use reghorizon::model::Checkpoint;
use reghorizon::selfcheck::{
    injected_bug_case, loss_cases, primitive_cases, run_case, GradRow, GRAD_TOLERANCE,
};
use reghorizon::trainer::{
    config_hash, read_records, train_run, write_records, RunRecord, TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "corpus.manifest.json";
pub const RUN_FILE: &str = "run.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DEV_SCORES_FILE: &str = "dev_scores.jsonl";
pub const TEST_SCORES_FILE: &str = "test_scores.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_FILE: &str = "fit_report.json";
pub const REPORT_META_FILE: &str = "fit_report.meta.json";
pub const COLLAPSE_FILE: &str = "collapse.csv";

/// Resamples used by the bootstrap command unless overridden.
pub const DEFAULT_RESAMPLES: usize = 1000;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn spec_hash(spec: &CorpusSpec) -> String {
    sha256_hex(&serde_json::to_vec(spec).expect("spec serializes"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub spec_hash: String,
    pub lines: usize,
    pub corpus_sha256: String,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub corpus: PathBuf,
    pub manifest: CorpusManifest,
}

/// Writes the corpus as JSONL plus a manifest carrying the spec hash.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<GenOutput> {
    let dir = config.prepare_output()?;
    let corpus = generate(&config.corpus)?;
    let mut bytes = Vec::new();
    write_jsonl(&corpus.triples, &mut bytes)?;
    let path = dir.join(CORPUS_FILE);
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    let manifest = CorpusManifest {
        spec: config.corpus.clone(),
        spec_hash: spec_hash(&config.corpus),
        lines: corpus.triples.len(),
        corpus_sha256: sha256_hex(&bytes),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(GenOutput {
        corpus: path,
        manifest,
    })
}

#[derive(Debug, Clone, Serialize)]
struct ItemScore {
    score: f64,
}

fn write_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut out, &ItemScore { score: *s })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub record: RunRecord,
    pub steps: u64,
}

/// One training run. Writes the record, the averaged checkpoint and the
/// per-item dev/test scores; a failed run still writes its record.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutput> {
    let dir = config.prepare_output()?;
    let corpus = generate(&config.corpus)?;
    let out = train_run(&config.model, &corpus, &config.train)?;
    let mut bytes = Vec::new();
    write_records(std::slice::from_ref(&out.record), &mut bytes)?;
    fs::write(dir.join(RUN_FILE), bytes)?;
    Checkpoint::from_model(&out.model, Some(out.record.config_hash.clone()))
        .save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(dev) = &out.dev {
        write_scores(&dir.join(DEV_SCORES_FILE), &dev.item_scores)?;
    }
    if let Some(test) = &out.test {
        write_scores(&dir.join(TEST_SCORES_FILE), &test.item_scores)?;
    }
    Ok(TrainOutput {
        record: out.record,
        steps: out.steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub results: PathBuf,
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl SweepOutput {
    pub fn any_succeeded(&self) -> bool {
        self.failed < self.total
    }
}

/// Records from a results file, ignoring a final line cut short by an
/// interrupted write.
fn read_complete_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    Ok(read_records(complete.as_bytes())?)
}

/// Runs every grid point not already present in the results file, on
/// `workers` threads. Finished runs are appended as they complete so an
/// interrupted sweep resumes where it stopped; at the end the file is
/// rewritten in grid order.
pub fn cmd_sweep(config: &ExperimentConfig, workers: usize) -> Result<SweepOutput> {
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    let Some(sweep) = &config.sweep else {
        bail!("config has no sweep section");
    };
    let dir = config.prepare_output()?;
    let grid = expand_grid(sweep, &config.train)?;
    let hashes: Vec<String> = grid
        .iter()
        .map(|t| config_hash(&config.model, &config.corpus, t))
        .collect();

    let path = dir.join(RESULTS_FILE);
    let mut done: Vec<RunRecord> = if path.exists() {
        read_complete_records(&path)?
    } else {
        Vec::new()
    };
    let have: HashSet<&str> = done.iter().map(|r| r.config_hash.as_str()).collect();
    let todo: Vec<usize> = (0..grid.len())
        .filter(|i| !have.contains(hashes[*i].as_str()))
        .collect();
    let skipped = grid.len() - todo.len();

    if !todo.is_empty() {
        let mut kept = Vec::new();
        write_records(&done, &mut kept)?;
        fs::write(&path, kept)?;
        let corpus = generate(&config.corpus)?;
        let sink = Mutex::new(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)?,
        );
        let finished = Mutex::new(Vec::with_capacity(todo.len()));
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);
        std::thread::scope(|s| {
            for _ in 0..workers.min(todo.len()) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    if k >= todo.len() || first_error.lock().unwrap().is_some() {
                        break;
                    }
                    let run: &TrainConfig = &grid[todo[k]];
                    let result = train_run(&config.model, &corpus, run)
                        .map_err(anyhow::Error::from)
                        .and_then(|o| {
                            let mut line = Vec::new();
                            write_records(std::slice::from_ref(&o.record), &mut line)?;
                            let mut f = sink.lock().unwrap();
                            f.write_all(&line)?;
                            f.flush()?;
                            Ok(o.record)
                        });
                    match result {
                        Ok(r) => finished.lock().unwrap().push(r),
                        Err(e) => {
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e.context("sweep run failed"));
        }
        done.extend(finished.into_inner().unwrap());
    }

    let mut ordered = Vec::with_capacity(grid.len());
    for h in &hashes {
        if let Some(r) = done.iter().find(|r| &r.config_hash == h) {
            ordered.push(r.clone());
        }
    }
    let mut bytes = Vec::new();
    write_records(&ordered, &mut bytes)?;
    fs::write(&path, bytes)?;
    Ok(SweepOutput {
        results: path,
        total: ordered.len(),
        executed: todo.len(),
        skipped,
        failed: ordered.iter().filter(|r| r.failed).count(),
    })
}

/// Provenance and uncertainty kept beside the fixed-schema report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub input_sha256: String,
    pub config_hashes: Vec<String>,
    pub n_records: usize,
    pub n_regression_points: usize,
    pub base: HyperPoint,
    pub fit: RegressionFit,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutput {
    pub report: FitReport,
    pub fit: RegressionFit,
    pub rows: Vec<CollapseRow>,
}

/// Seed-average, keep the over-regularized points, fit, and export every
/// record's R for plotting.
pub fn cmd_analyze(results: &Path, out_dir: &Path, base: &HyperPoint) -> Result<AnalyzeOutput> {
    let bytes = fs::read(results).with_context(|| format!("reading {}", results.display()))?;
    let records = read_records(bytes.as_slice())?;
    let selected = over_regularized(&aggregate(&records));
    let fit = fit_regression(&selected)?;
    let rows = collapse_export(&fit, &records, base);

    fs::create_dir_all(out_dir)?;
    let report = fit.report();
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    let mut config_hashes: Vec<String> = records.iter().map(|r| r.config_hash.clone()).collect();
    config_hashes.sort();
    config_hashes.dedup();
    write_json(
        &out_dir.join(REPORT_META_FILE),
        &ReportMeta {
            input_sha256: sha256_hex(&bytes),
            config_hashes,
            n_records: records.len(),
            n_regression_points: selected.len(),
            base: *base,
            fit: fit.clone(),
        },
    )?;
    let mut csv = BufWriter::new(File::create(out_dir.join(COLLAPSE_FILE))?);
    write_collapse_csv(&rows, &mut csv)?;
    csv.flush()?;
    Ok(AnalyzeOutput { report, fit, rows })
}

/// Base α's and dropout for family labels: the config's sweep base when
/// given, otherwise the default sweep base.
pub fn analysis_base(config: Option<&ExperimentConfig>) -> HyperPoint {
    config
        .and_then(|c| c.sweep.as_ref())
        .cloned()
        .unwrap_or_default()
        .base_point()
}

/// Reads per-item scores, one `{"score": x}` object per line.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Line {
        score: f64,
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", path.display(), n + 1))?;
        out.push(l.score);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub p_value: f64,
    pub n_items: usize,
    pub n_resamples: usize,
    pub seed: u64,
    pub mean_a: f64,
    pub mean_b: f64,
}

/// Paired bootstrap p-value that system A does not beat system B.
pub fn cmd_bootstrap(a: &Path, b: &Path, n_resamples: usize, seed: u64) -> Result<BootstrapReport> {
    let (sa, sb) = (read_scores(a)?, read_scores(b)?);
    let p = paired_bootstrap(&sa, &sb, n_resamples, seed)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(BootstrapReport {
        p_value: p,
        n_items: sa.len(),
        n_resamples,
        seed,
        mean_a: mean(&sa),
        mean_b: mean(&sb),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckgradOutput {
    pub rows: Vec<GradRow>,
    /// The deliberately broken fixture; it must fail.
    pub fixture: GradRow,
}

impl CheckgradOutput {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(|r| r.passed) && !self.fixture.passed
    }
}

/// Finite-difference check of every primitive and every loss combination.
pub fn cmd_checkgrad() -> Result<CheckgradOutput> {
    let mut rows: Vec<GradRow> = primitive_cases()
        .iter()
        .map(|c| run_case(c, GRAD_TOLERANCE))
        .collect();
    rows.extend(loss_cases()?.iter().map(|c| run_case(c, GRAD_TOLERANCE)));
    Ok(CheckgradOutput {
        rows,
        fixture: run_case(&injected_bug_case(), GRAD_TOLERANCE),
    })
}

pub fn render_checkgrad(out: &CheckgradOutput) -> String {
    let width = out
        .rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(0)
        .max(12);
    let mut s = format!("{:<width$}  {:>12}  result\n", "case", "max rel err");
    for r in &out.rows {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {verdict}\n",
            r.name, r.max_rel_error
        ));
    }
    let f = &out.fixture;
    let verdict = if f.passed { "NOT DETECTED" } else { "detected" };
    s.push_str(&format!(
        "{:<width$}  {:>12.3e}  {verdict}\n",
        f.name, f.max_rel_error
    ));
    s
}
