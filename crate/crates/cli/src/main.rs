//! `unlearn-lens`: staged or one-shot unlearning runs, diagnostics on run
//! directories or on external activation dumps, and regime classification.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure. Failures
//! print a message and a one-line JSON error object on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use unlearn_lens::corpus::Domain;
use unlearn_lens::diagnostics::{
    compare_activations, layers_mean_pca_distance, perturbation_probe, LayerDiagnostics,
    PerturbTarget, ProbeSet,
};
use unlearn_lens::dump::{read_dump, write_dump, ActivationDump};
use unlearn_lens::io::{self, RunDir};
use unlearn_lens::model::TinyLM;
use unlearn_lens::protocols::{
    run_pipeline, ExperimentConfig, PHASE_ORIGINAL, PHASE_RELEARNED, PHASE_UNLEARNED,
};
use unlearn_lens::{Error, ErrorKind, Result};

const THREADS_ENV: &str = "UNLEARN_LENS_THREADS";

#[derive(Parser)]
#[command(name = "unlearn-lens", version, about = "Unlearning reversibility laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named config: `reversible` or `irreversible`.
    #[arg(long)]
    preset: Option<String>,
    /// Seed to run; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, u64)> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => io::load_config(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        let seed = match self.seed {
            Some(s) => s,
            None => *cfg.seeds.first().ok_or(Error::EmptyInput)?,
        };
        Ok((cfg, seed))
    }
}

#[derive(Args)]
struct RunArg {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train θ0 and initialise a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the configured (continual) unlearning to θ0.
    Unlearn(RunArg),
    /// Budget-limited fine-tuning of θu.
    Relearn(RunArg),
    /// Diagnose a run directory, or compare two activation dumps.
    Diagnose {
        #[arg(long, conflicts_with_all = ["orig", "upd"], required_unless_present_all = ["orig", "upd"])]
        run: Option<PathBuf>,
        /// Dump of the reference model.
        #[arg(long, requires = "upd")]
        orig: Option<PathBuf>,
        /// Dump of the updated model.
        #[arg(long, requires = "orig")]
        upd: Option<PathBuf>,
        /// Also write the dump comparison JSON here.
        #[arg(long, conflicts_with = "run")]
        out: Option<PathBuf>,
    },
    /// Print the regime verdict from a diagnosed run.
    Classify(RunArg),
    /// Perturb hidden weights of a stored model and sweep diagnostics.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = PHASE_ORIGINAL)]
        phase: String,
        #[arg(long, default_value = "forget")]
        source: Domain,
        /// Frobenius budgets of the total perturbation.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1,3")]
        budgets: Vec<f64>,
        /// Perturb only this hidden layer; all layers otherwise.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-emit plot CSVs and print a metric summary of a diagnosed run.
    Report(RunArg),
    /// Full pipeline (train, unlearn, relearn, diagnose) into one directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export probe activations of a stored model as a ULNS dump.
    Dump {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = PHASE_ORIGINAL)]
        phase: String,
        #[arg(long, default_value = "forget")]
        source: Domain,
        #[arg(long)]
        out: PathBuf,
        /// Label stored in the dump; defaults to the phase name.
        #[arg(long)]
        label: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            report_error("usage", "validation", &e.kind().to_string());
            return ExitCode::from(1);
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let (kind, code) = match e.kind() {
                ErrorKind::Validation => ("validation", 1),
                ErrorKind::Numerical => ("numerical", 2),
            };
            report_error(e.code(), kind, &e.to_string());
            ExitCode::from(code)
        }
    }
}

fn report_error(code: &str, kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "code": code, "kind": kind, "message": message } }));
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Invalid(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(e.to_string()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => {
            let (cfg, seed) = config.resolve()?;
            let dir = RunDir::new(out);
            io::stage_train(&dir, &cfg, seed)?;
            println!("wrote {}", dir.theta0().display());
        }
        Command::Unlearn(a) => {
            let dir = RunDir::new(a.run);
            io::stage_unlearn(&dir)?;
            println!("wrote {}", dir.theta_u().display());
        }
        Command::Relearn(a) => {
            let dir = RunDir::new(a.run);
            let (_, log) = io::stage_relearn(&dir)?;
            println!(
                "relearned on {} ({} sequences, {} steps)",
                log.source.as_str(),
                log.budget,
                log.steps
            );
        }
        Command::Diagnose {
            run: Some(run), ..
        } => {
            let dir = RunDir::new(run);
            let report = io::stage_diagnose(&dir)?;
            for s in &report.summaries {
                println!(
                    "{} probe={} mean_pca_distance={:.4} mia_auc={}",
                    s.phase,
                    s.probe_source,
                    s.mean_pca_distance,
                    s.mia_auc.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"))
                );
            }
            println!("{}", report.verdict);
        }
        Command::Diagnose {
            orig: Some(orig),
            upd: Some(upd),
            out,
            ..
        } => {
            let text = serde_json::to_string_pretty(&compare_dumps(&orig, &upd)?)? + "\n";
            if let Some(out) = out {
                io::write_atomic(&out, text.as_bytes())?;
            }
            print!("{text}");
        }
        Command::Diagnose { .. } => {
            return Err(Error::Invalid("diagnose needs --run or both --orig and --upd".into()))
        }
        Command::Classify(a) => {
            let verdict = io::classify_run(&RunDir::new(a.run))?;
            println!("{verdict}");
        }
        Command::Probe {
            run,
            phase,
            source,
            budgets,
            layer,
            seed,
        } => {
            let dir = RunDir::new(run);
            let (cfg, run_seed) = dir.load_config()?;
            let model = load_phase(&dir, &cfg, &phase)?;
            let corpora = dir.corpora(&cfg, run_seed)?;
            let probe = ProbeSet::from_corpus(corpora.by_domain(source), cfg.probe.size, cfg.model.context_len)?;
            let target = layer.map_or(PerturbTarget::AllLayers, PerturbTarget::Layer);
            let report = perturbation_probe(&model, &probe, &budgets, target, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report(a) => report(&RunDir::new(a.run))?,
        Command::Run { config, out } => {
            let (cfg, seed) = config.resolve()?;
            let dir = RunDir::new(out);
            let run = run_pipeline(&cfg, seed)?;
            io::write_run(&dir, &run)?;
            for s in &run.diagnostics.summaries {
                println!(
                    "{} probe={} mean_pca_distance={:.4}",
                    s.phase, s.probe_source, s.mean_pca_distance
                );
            }
            println!("{}", run.verdict);
        }
        Command::Dump {
            run,
            phase,
            source,
            out,
            label,
        } => {
            let dir = RunDir::new(run);
            let (cfg, seed) = dir.load_config()?;
            let model = load_phase(&dir, &cfg, &phase)?;
            let corpora = dir.corpora(&cfg, seed)?;
            let probe = ProbeSet::from_corpus(corpora.by_domain(source), cfg.probe.size, cfg.model.context_len)?;
            let acts = probe.activations(&model)?;
            let dump = ActivationDump::from_activations(label.as_deref().unwrap_or(&phase), source, &acts)?;
            write_dump(&dump, &out)?;
            println!("wrote {} ({} layers x {} rows)", out.display(), acts.len(), probe.len());
        }
    }
    Ok(())
}

fn load_phase(dir: &RunDir, cfg: &ExperimentConfig, phase: &str) -> Result<TinyLM> {
    let path = match phase {
        PHASE_ORIGINAL => dir.theta0(),
        PHASE_UNLEARNED => dir.theta_u(),
        PHASE_RELEARNED => dir.theta_r(cfg),
        other => {
            return Err(Error::Invalid(format!(
                "unknown phase `{other}` (expected original, unlearned or relearned)"
            )))
        }
    };
    dir.load_model(&path)
}

#[derive(Serialize)]
struct DumpComparison {
    orig_label: String,
    upd_label: String,
    probe_source: Domain,
    rows: u32,
    layers: Vec<LayerDiagnostics>,
    mean_pca_distance: f64,
}

fn compare_dumps(orig: &Path, upd: &Path) -> Result<DumpComparison> {
    let a = read_dump(orig)?;
    let b = read_dump(upd)?;
    let ia: Vec<u32> = a.layers.iter().map(|l| l.index).collect();
    let ib: Vec<u32> = b.layers.iter().map(|l| l.index).collect();
    if ia != ib {
        return Err(Error::Invalid(format!("dumps cover different layers: {ia:?} vs {ib:?}")));
    }
    if a.source != b.source {
        return Err(Error::Invalid(format!(
            "dumps come from different probe sources ({} vs {})",
            a.source, b.source
        )));
    }
    let mut layers = compare_activations(&a.to_matrices()?, &b.to_matrices()?)?;
    // report the layer indices stored in the dumps
    for (l, &index) in layers.iter_mut().zip(&ia) {
        l.layer = index as usize;
    }
    let mean_pca_distance = layers_mean_pca_distance(&layers)?;
    Ok(DumpComparison {
        orig_label: a.label,
        upd_label: b.label,
        probe_source: a.source,
        rows: a.layers[0].rows,
        layers,
        mean_pca_distance,
    })
}

fn report(dir: &RunDir) -> Result<()> {
    let report = io::load_report(dir)?;
    io::write_plots(dir, &report)?;
    let metrics = io::parse_metrics_csv(&std::fs::read_to_string(dir.metrics())?)?;
    println!("seed {} regime {}", report.seed, report.regime);
    println!("{:<12} {:<10} {:<11} {:>10}", "phase", "corpus", "metric", "value");
    for m in metrics.iter().filter(|m| !m.phase.starts_with("request_")) {
        println!("{:<12} {:<10} {:<11} {:>10.4}", m.phase, m.corpus, m.metric, m.value);
    }
    for s in &report.summaries {
        println!(
            "{} probe={} mean_pca_distance={:.4}",
            s.phase, s.probe_source, s.mean_pca_distance
        );
    }
    println!("plots in {}", dir.plots().display());
    println!("{}", report.verdict);
    Ok(())
}
