//! Run orchestration behind the command-line tool: dataset generation,
//! training runs with persisted records, evaluation and ablation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{canonical_key, scalar, ExperimentConfig};
use crate::error::{NirError, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, EMBEDDER_FILE, FLOW_FILE, PROXIES_FILE};
use crate::synthetic::{make_benchmark, Dataset, SyntheticSpec};
use crate::trainer::{embed_dataset, model_grad_check, probe_batch, train, EpochRecord, GradCheckReport};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub epoch_seconds: Vec<f64>,
    /// Final metrics per split, computed from the saved checkpoint.
    pub metrics: BTreeMap<String, MetricsReport>,
    /// sha256 of input data and checkpoint files, keyed by role.
    pub checksums: BTreeMap<String, String>,
    pub timestamp: u64,
}

impl RunRecord {
    /// The record with wall-clock fields cleared; equal for repeated runs.
    pub fn without_timing(&self) -> Self {
        Self { epoch_seconds: Vec::new(), timestamp: 0, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| NirError::Format(format!("{}: {e}", path.display())))
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_map(&self.config)
    }

    /// Test metrics when a test split was evaluated, otherwise train.
    pub fn headline(&self) -> Option<&MetricsReport> {
        self.metrics.get("test").or_else(|| self.metrics.get("train"))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct GeneratedData {
    pub train: PathBuf,
    pub test: PathBuf,
    pub benchmark_rows: (usize, usize),
}

/// Writes `train.csv`, `test.csv` and `spec.json` into `dir`.
pub fn gen_data(spec: &SyntheticSpec, dir: &Path) -> Result<GeneratedData> {
    let bench = make_benchmark(spec)?;
    fs::create_dir_all(dir)?;
    let train = dir.join(TRAIN_FILE);
    let test = dir.join(TEST_FILE);
    bench.train.save(&train)?;
    bench.test.save(&test)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec).expect("spec serializes") + "\n")?;
    Ok(GeneratedData { train, test, benchmark_rows: (bench.train.len(), bench.test.len()) })
}

/// Trains on in-memory datasets and returns the quantized model together
/// with its per-epoch log. Metrics are left to the caller.
pub fn fit(cfg: &ExperimentConfig, train_set: &Dataset, eval: Option<&Dataset>) -> Result<(Model, crate::trainer::TrainLog)> {
    cfg.validate()?;
    let t = &cfg.train;
    let mut model = Model::new(&t.model, train_set.dim(), train_set.num_classes(), t.seed)?;
    let log = train(train_set, eval, &mut model, t)?;
    model.quantize();
    Ok((model, log))
}

pub fn evaluate_model(model: &Model, data: &Dataset, ks: &[usize], nmi_seed: u64) -> Result<MetricsReport> {
    MetricsReport::compute(&embed_dataset(model, data)?, ks, nmi_seed)
}

fn required_data(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.data_train
        .as_deref()
        .ok_or_else(|| NirError::InvalidConfig("data.train: no training data configured".into()))
}

/// Full training run: loads data, trains, writes the checkpoint and
/// `run.json` into `out`, and returns the record.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let train_path = required_data(cfg)?;
    let train_set = Dataset::load(train_path)?;
    let test_set = cfg.data_test.as_deref().map(Dataset::load).transpose()?;

    let (model, log) = fit(cfg, &train_set, test_set.as_ref())?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.save(&ckpt)?;
    // metrics come from the reloaded checkpoint so eval replays them exactly
    let model = Model::load(&ckpt)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("train".to_string(), evaluate_model(&model, &train_set, &cfg.eval_ks, cfg.nmi_seed)?);
    if let Some(test) = &test_set {
        metrics.insert("test".to_string(), evaluate_model(&model, test, &cfg.eval_ks, cfg.nmi_seed)?);
    }

    let mut checksums = BTreeMap::new();
    checksums.insert("data.train".to_string(), sha256_file(train_path)?);
    if let Some(p) = &cfg.data_test {
        checksums.insert("data.test".to_string(), sha256_file(p)?);
    }
    for file in [EMBEDDER_FILE, PROXIES_FILE, FLOW_FILE] {
        checksums.insert(format!("{CHECKPOINT_DIR}/{file}"), sha256_file(&ckpt.join(file))?);
    }

    let record = RunRecord {
        config: cfg.to_map(),
        seed: cfg.train.seed,
        epochs: log.epochs,
        epoch_seconds: log.epoch_seconds,
        metrics,
        checksums,
        timestamp: unix_time(),
    };
    record.save(&out.join(RUN_FILE))?;
    Ok(record)
}

pub fn run_eval(checkpoint: &Path, data: &Path, ks: &[usize], nmi_seed: u64) -> Result<MetricsReport> {
    let model = Model::load(checkpoint)?;
    evaluate_model(&model, &Dataset::load(data)?, ks, nmi_seed)
}

/// Gradient check of the configured objective on a batch of `n` training
/// rows drawn with the run seed.
pub fn run_gradcheck(cfg: &ExperimentConfig, n: usize, step: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let data = Dataset::load(required_data(cfg)?)?;
    let model = Model::new(&cfg.train.model, data.dim(), data.num_classes(), cfg.train.seed)?;
    let (x, labels) = probe_batch(&data, n, cfg.train.seed);
    model_grad_check(&model, &cfg.train, x.view(), &labels, cfg.train.seed, step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Cartesian product of all axes.
    Grid,
    /// Axes advance together; all must have the same length.
    Zip,
}

/// Ablation sweep: named axes of values for config keys, plus seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub mode: SweepMode,
    pub seeds: Vec<u64>,
    pub axes: Vec<(String, Vec<String>)>,
}

impl SweepSpec {
    /// ```toml
    /// mode = "grid"
    /// seeds = [0, 1, 2]
    /// [axes]
    /// "flow.placement" = ["all", "start", "mid", "end"]
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| NirError::Format(e.to_string()))?;
        let mut mode = SweepMode::Grid;
        let mut seeds = Vec::new();
        let mut axes = Vec::new();
        for (k, v) in &table {
            match (k.as_str(), v) {
                ("mode", toml::Value::String(s)) => {
                    mode = match s.as_str() {
                        "grid" => SweepMode::Grid,
                        "zip" => SweepMode::Zip,
                        other => return Err(NirError::InvalidConfig(format!("mode: expected grid or zip, got '{other}'"))),
                    }
                }
                ("seeds", toml::Value::Array(items)) => {
                    for item in items {
                        let s = item
                            .as_integer()
                            .filter(|s| *s >= 0)
                            .ok_or_else(|| NirError::InvalidConfig(format!("seeds: bad entry {item}")))?;
                        seeds.push(s as u64);
                    }
                }
                ("axes", toml::Value::Table(t)) => {
                    for (key, values) in t {
                        let values = match values {
                            toml::Value::Array(items) => items.iter().map(|i| scalar(key, i)).collect::<Result<Vec<_>>>()?,
                            single => vec![scalar(key, single)?],
                        };
                        axes.push((key.clone(), values));
                    }
                }
                (other, _) => return Err(NirError::UnknownKey(other.to_string())),
            }
        }
        let spec = Self { mode, seeds, axes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, values) in &self.axes {
            if canonical_key(key)? == "seed" {
                return Err(NirError::InvalidConfig("seed: use the `seeds` list instead of an axis".into()));
            }
            if values.is_empty() {
                return Err(NirError::InvalidConfig(format!("{key}: empty axis")));
            }
        }
        if self.mode == SweepMode::Zip {
            if let Some((_, first)) = self.axes.first() {
                if let Some((key, _)) = self.axes.iter().find(|(_, v)| v.len() != first.len()) {
                    return Err(NirError::InvalidConfig(format!("{key}: zip axes must have equal lengths")));
                }
            }
        }
        Ok(())
    }

    /// Settings of every sweep point, in order.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        match self.mode {
            SweepMode::Grid => {
                let mut out = vec![Vec::new()];
                for (key, values) in &self.axes {
                    out = out
                        .into_iter()
                        .flat_map(|p| {
                            values.iter().map(move |v| {
                                let mut p = p.clone();
                                p.push((key.clone(), v.clone()));
                                p
                            })
                        })
                        .collect();
                }
                out
            }
            SweepMode::Zip => {
                let n = self.axes.first().map_or(1, |(_, v)| v.len());
                (0..n).map(|i| self.axes.iter().map(|(k, v)| (k.clone(), v[i].clone())).collect()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub point: usize,
    pub seed: u64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub point: usize,
    pub settings: Vec<(String, String)>,
    pub runs: usize,
    /// Metric name -> (mean, sample standard deviation).
    pub stats: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub points: Vec<Vec<(String, String)>>,
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SummaryRow>,
}

/// Flat metric columns in a fixed order.
pub fn metric_columns(report: &MetricsReport) -> Vec<(String, f64)> {
    let mut cols: Vec<(String, f64)> = report.recall_at.iter().map(|(k, v)| (format!("recall@{k}"), *v)).collect();
    cols.extend([
        ("nmi".to_string(), report.nmi),
        ("map@1000".to_string(), report.map_at_1000),
        ("spectral_decay".to_string(), report.spectral_decay),
        ("pi_density".to_string(), report.pi_density),
        ("uniformity_g2".to_string(), report.uniformity_g2),
        ("concentration_variance".to_string(), report.concentration_variance),
    ]);
    cols
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(points: &[Vec<(String, String)>], runs: &[SweepRun]) -> Vec<SummaryRow> {
    points
        .iter()
        .enumerate()
        .map(|(p, settings)| {
            let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.point == p).collect();
            for run in &mine {
                if let Some(report) = run.record.headline() {
                    for (name, v) in metric_columns(report) {
                        columns.entry(name).or_default().push(v);
                    }
                }
            }
            let stats = columns.into_iter().map(|(k, v)| (k, mean_and_std(&v))).collect();
            SummaryRow { point: p, settings: settings.clone(), runs: mine.len(), stats }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn metrics_csv(spec: &SweepSpec, runs: &[SweepRun], points: &[Vec<(String, String)>]) -> String {
    let axis_names: Vec<&str> = spec.axes.iter().map(|(k, _)| k.as_str()).collect();
    let mut out = String::new();
    let mut header_done = false;
    for run in runs {
        for (split, report) in &run.record.metrics {
            let cols = metric_columns(report);
            if !header_done {
                let mut h = vec!["point".to_string(), "seed".to_string()];
                h.extend(axis_names.iter().map(|a| csv_field(a)));
                h.push("split".into());
                h.extend(cols.iter().map(|(n, _)| n.clone()));
                out.push_str(&h.join(","));
                out.push('\n');
                header_done = true;
            }
            let mut row = vec![run.point.to_string(), run.seed.to_string()];
            row.extend(points[run.point].iter().map(|(_, v)| csv_field(v)));
            row.push(split.clone());
            row.extend(cols.iter().map(|(_, v)| format!("{v:?}")));
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}

fn summary_csv(spec: &SweepSpec, summary: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut h = vec!["point".to_string()];
    h.extend(spec.axes.iter().map(|(k, _)| csv_field(k)));
    h.push("runs".into());
    if let Some(first) = summary.first() {
        for name in first.stats.keys() {
            h.push(format!("{name}_mean"));
            h.push(format!("{name}_std"));
        }
    }
    out.push_str(&h.join(","));
    out.push('\n');
    for row in summary {
        let mut r = vec![row.point.to_string()];
        r.extend(row.settings.iter().map(|(_, v)| csv_field(v)));
        r.push(row.runs.to_string());
        for (mean, std) in row.stats.values() {
            r.push(format!("{mean:?}"));
            r.push(format!("{std:?}"));
        }
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Runs every sweep point for every seed. Each run writes to its own
/// `point{P}_seed{S}` directory; `metrics.csv` and `summary.csv` collect
/// the results.
pub fn run_ablation(base: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> Result<Ablation> {
    spec.validate()?;
    let points = spec.points();
    let seeds = if spec.seeds.is_empty() { vec![base.train.seed] } else { spec.seeds.clone() };

    let mut jobs = Vec::new();
    for (p, settings) in points.iter().enumerate() {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.apply_map(settings.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
            cfg.train.seed = seed;
            cfg.validate()?;
            jobs.push((p, seed, cfg));
        }
    }
    let runs = jobs
        .into_par_iter()
        .map(|(point, seed, cfg)| {
            let dir = out.join(format!("point{point:02}_seed{seed}"));
            fs::create_dir_all(&dir)?;
            Ok(SweepRun { point, seed, record: run_train(&cfg, &dir)? })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = summarize(&points, &runs);
    fs::write(out.join("metrics.csv"), metrics_csv(spec, &runs, &points))?;
    fs::write(out.join("summary.csv"), summary_csv(spec, &summary))?;
    Ok(Ablation { points, runs, summary })
}
