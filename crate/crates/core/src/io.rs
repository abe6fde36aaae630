//! Config loading, atomic file writes, and the run-directory artifacts:
//! checkpoints, `metrics.csv`, `diagnostics.json` and plot-data CSVs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{make_synthetic_corpora, Domain, SyntheticCorpora};
use crate::diagnostics::fisher_bin_edges;
use crate::error::{Error, Result};
use crate::model::TinyLM;
use crate::protocols::{
    evaluate_states, relearn, unlearn_stage, verdict_from_metrics, DiagnosticRecord,
    ExperimentConfig, FisherRecord, ForgettingRun, MetricRecord, PhaseSummary, RelearnLog,
    RunDiagnostics,
};
use crate::regimes::RegimeVerdict;

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses and validates an experiment config. Unknown fields and bad
/// values are reported with their field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn config_json(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)? + "\n")
}

// ------------------------------------------------------------ metrics ----

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    phase: String,
    method: String,
    lr: f64,
    #[serde(rename = "N")]
    n: usize,
    corpus: Domain,
    metric: String,
    value: f64,
    seed: u64,
}

pub fn metrics_csv(cfg: &ExperimentConfig, seed: u64, records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(MetricRow {
            phase: r.phase.clone(),
            method: cfg.unlearn.loss.method.name().to_string(),
            lr: cfg.unlearn.peak_lr,
            n: cfg.unlearn.n_requests,
            corpus: r.corpus,
            metric: r.metric.clone(),
            value: r.value,
            seed,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<MetricRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(MetricRecord {
                phase: row.phase,
                corpus: row.corpus,
                metric: row.metric,
                value: row.value,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

// -------------------------------------------------------- diagnostics ----

/// Contents of `diagnostics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub seed: u64,
    pub layers: Vec<DiagnosticRecord>,
    pub summaries: Vec<PhaseSummary>,
    pub fisher: Vec<FisherRecord>,
    pub fisher_bin_edges: Vec<f64>,
    pub verdict: RegimeVerdict,
    pub regime: String,
    pub config: ExperimentConfig,
}

impl DiagnosticsReport {
    pub fn new(cfg: &ExperimentConfig, seed: u64, diag: &RunDiagnostics, verdict: RegimeVerdict) -> Self {
        Self {
            seed,
            layers: diag.layers.clone(),
            summaries: diag.summaries.clone(),
            fisher: diag.fisher.clone(),
            fisher_bin_edges: fisher_bin_edges(),
            verdict,
            regime: verdict.label(),
            config: cfg.for_seed(seed),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// `(file name, contents)` of the plot-data CSVs.
pub fn plot_csvs(report: &DiagnosticsReport) -> Result<Vec<(&'static str, String)>> {
    fn opt(v: Option<f64>) -> String {
        v.map_or_else(String::new, |x| x.to_string())
    }
    let mut sim = String::from("phase,probe_source,layer,pca_similarity,pca_similarity_abs,degenerate_gap\n");
    let mut shift = String::from("phase,probe_source,layer,shift_pc1,shift_pc2\n");
    let mut cka = String::from("phase,probe_source,layer,cka\n");
    for r in &report.layers {
        let l = &r.layer;
        let key = format!("{},{},{}", r.phase, r.probe_source, l.layer);
        sim += &format!(
            "{key},{},{},{}\n",
            opt(l.pca_similarity),
            opt(l.pca_similarity_abs),
            l.degenerate_gap
        );
        shift += &format!("{key},{},{}\n", l.shift_pc1, l.shift_pc2);
        cka += &format!("{key},{}\n", opt(l.cka));
    }
    let edges = &report.fisher_bin_edges;
    let mut fisher = String::from("phase,probe_source,group,bin,lower,upper,count\n");
    for f in &report.fisher {
        for g in &f.groups {
            for (b, c) in g.histogram.iter().enumerate() {
                fisher += &format!(
                    "{},{},{},{b},{},{},{c}\n",
                    f.phase,
                    f.probe_source,
                    g.name,
                    edges[b],
                    edges[b + 1]
                );
            }
        }
    }
    Ok(vec![
        ("pca_similarity.csv", sim),
        ("pca_shift.csv", shift),
        ("cka.csv", cka),
        ("fisher_histogram.csv", fisher),
    ])
}

// ------------------------------------------------------ run directory ----

/// Paths of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.tlmc"))
    }
    pub fn theta0(&self) -> PathBuf {
        self.checkpoint("theta0")
    }
    pub fn theta_u(&self) -> PathBuf {
        self.checkpoint("theta_u")
    }
    pub fn theta_r(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.checkpoint(&format!("theta_r_{}", cfg.relearn.source.as_str()))
    }
    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }
    pub fn request_metrics(&self) -> PathBuf {
        self.root.join("request_metrics.csv")
    }
    pub fn relearn_log(&self) -> PathBuf {
        self.root.join("relearn_log.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.json")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Config stored in the run; its single seed identifies the run.
    pub fn load_config(&self) -> Result<(ExperimentConfig, u64)> {
        let cfg = load_config(&self.config())?;
        let seed = *cfg.seeds.first().ok_or_else(|| Error::config("seeds", "empty"))?;
        Ok((cfg, seed))
    }

    pub fn load_model(&self, path: &Path) -> Result<TinyLM> {
        if !path.exists() {
            return Err(Error::MissingPhase(path.display().to_string()));
        }
        TinyLM::read_checkpoint(fs::File::open(path)?)
    }

    pub fn corpora(&self, cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticCorpora> {
        make_synthetic_corpora(seed, &cfg.corpus)
    }
}

fn write_model(path: &Path, m: &TinyLM) -> Result<()> {
    write_atomic(path, &m.to_checkpoint_bytes())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
}

/// Writes the config (restricted to `seed`) and `θ0`.
pub fn stage_train(dir: &RunDir, cfg: &ExperimentConfig, seed: u64) -> Result<TinyLM> {
    let cfg = cfg.for_seed(seed);
    cfg.validate()?;
    let corpora = make_synthetic_corpora(seed, &cfg.corpus)?;
    let theta0 = crate::protocols::train_base(&cfg, &corpora, seed)?;
    write_atomic(&dir.config(), config_json(&cfg)?.as_bytes())?;
    write_model(&dir.theta0(), &theta0)?;
    Ok(theta0)
}

pub fn stage_unlearn(dir: &RunDir) -> Result<TinyLM> {
    let (cfg, seed) = dir.load_config()?;
    let corpora = dir.corpora(&cfg, seed)?;
    let theta0 = dir.load_model(&dir.theta0())?;
    let out = unlearn_stage(&theta0, &corpora, &cfg, seed)?;
    write_model(&dir.theta_u(), &out.theta_u)?;
    write_json(&dir.partition(), &out.partition)?;
    write_atomic(
        &dir.request_metrics(),
        metrics_csv(&cfg, seed, &out.request_metrics)?.as_bytes(),
    )?;
    Ok(out.theta_u)
}

pub fn stage_relearn(dir: &RunDir) -> Result<(TinyLM, RelearnLog)> {
    let (cfg, seed) = dir.load_config()?;
    let corpora = dir.corpora(&cfg, seed)?;
    let theta_u = dir.load_model(&dir.theta_u())?;
    let (theta_r, log) = relearn(&theta_u, &corpora, &cfg, seed)?;
    write_model(&dir.theta_r(&cfg), &theta_r)?;
    write_json(&dir.relearn_log(), &log)?;
    Ok((theta_r, log))
}

/// Recomputes metrics, diagnostics and plots from the stored checkpoints.
pub fn stage_diagnose(dir: &RunDir) -> Result<DiagnosticsReport> {
    let (cfg, seed) = dir.load_config()?;
    let corpora = dir.corpora(&cfg, seed)?;
    let theta0 = dir.load_model(&dir.theta0())?;
    let theta_u = dir.load_model(&dir.theta_u())?;
    let theta_r = dir.load_model(&dir.theta_r(&cfg))?;
    let requests = match fs::read_to_string(dir.request_metrics()) {
        Ok(text) => parse_metrics_csv(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let (metrics, diag, verdict) = evaluate_states(&cfg, &corpora, &theta0, &theta_u, &theta_r, &requests)?;
    let report = DiagnosticsReport::new(&cfg, seed, &diag, verdict);
    write_outputs(dir, &cfg, seed, &metrics, &report)?;
    Ok(report)
}

fn write_outputs(
    dir: &RunDir,
    cfg: &ExperimentConfig,
    seed: u64,
    metrics: &[MetricRecord],
    report: &DiagnosticsReport,
) -> Result<()> {
    write_atomic(&dir.metrics(), metrics_csv(cfg, seed, metrics)?.as_bytes())?;
    write_atomic(&dir.diagnostics(), report.to_json()?.as_bytes())?;
    write_plots(dir, report)
}

pub fn write_plots(dir: &RunDir, report: &DiagnosticsReport) -> Result<()> {
    for (name, text) in plot_csvs(report)? {
        write_atomic(&dir.plots().join(name), text.as_bytes())?;
    }
    Ok(())
}

pub fn load_report(dir: &RunDir) -> Result<DiagnosticsReport> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.diagnostics())?)?)
}

/// Verdict recomputed from the stored `metrics.csv`.
pub fn classify_run(dir: &RunDir) -> Result<RegimeVerdict> {
    let (cfg, _) = dir.load_config()?;
    let records = parse_metrics_csv(&fs::read_to_string(dir.metrics()).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPhase("metrics.csv (run diagnose first)".into())
        } else {
            e.into()
        }
    })?)?;
    verdict_from_metrics(&records, &cfg.thresholds)
}

/// Writes every artifact of a finished pipeline run.
pub fn write_run(dir: &RunDir, run: &ForgettingRun) -> Result<()> {
    let cfg = &run.config;
    write_atomic(&dir.config(), config_json(cfg)?.as_bytes())?;
    write_model(&dir.theta0(), &run.theta0)?;
    write_model(&dir.theta_u(), &run.theta_u)?;
    write_model(&dir.theta_r(cfg), &run.theta_r)?;
    write_json(&dir.partition(), &run.partition)?;
    let requests: Vec<MetricRecord> = run
        .metrics
        .iter()
        .filter(|r| r.phase.starts_with("request_"))
        .cloned()
        .collect();
    write_atomic(&dir.request_metrics(), metrics_csv(cfg, run.seed, &requests)?.as_bytes())?;
    write_json(&dir.relearn_log(), &run.relearn_log)?;
    let report = DiagnosticsReport::new(cfg, run.seed, &run.diagnostics, run.verdict);
    write_outputs(dir, cfg, run.seed, &run.metrics, &report)
}
