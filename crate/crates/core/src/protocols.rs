//! Experimental pipelines: base training, single and continual unlearning,
//! budget-limited relearning, and a full run that ties them together with
//! metrics and representation diagnostics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_synthetic_corpora, Corpus, CorpusSpec, Domain, SyntheticCorpora};
use crate::diagnostics::{
    compare_activations, fisher_diagonal, layers_mean_pca_distance, min_k_mia, FisherLabels,
    LayerDiagnostics, LayerFisher, ProbeSet,
};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, TinyLM};
use crate::objectives::{
    evaluate_objective, saliency_mask, Method, ObjectiveInputs, ReferenceModel, UnlearnLossSpec,
};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::regimes::{classify, compute_deltas, RegimeThresholds, RegimeVerdict, TaskAccuracies};
use crate::seed::{derive_indexed, derive_seed};

// -------------------------------------------------------------- config ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub peak_lr: f64,
    pub steps: usize,
    pub batch_sequences: usize,
    pub min_retain_accuracy: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            steps: 1500,
            batch_sequences: 32,
            min_retain_accuracy: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub loss: UnlearnLossSpec,
    pub peak_lr: f64,
    pub n_requests: usize,
    pub steps_per_request: usize,
    pub forget_batch_sequences: usize,
    pub retain_batch_sequences: usize,
    /// Mixed with the run seed to shuffle D_f before partitioning.
    pub request_order_seed: u64,
}

fn default_batch() -> usize {
    32
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            loss: UnlearnLossSpec::new(Method::Ga),
            peak_lr: 1e-3,
            n_requests: 1,
            steps_per_request: 20,
            forget_batch_sequences: default_batch(),
            retain_batch_sequences: default_batch(),
            request_order_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelearnSource {
    Forget,
    RetainSubset,
    Unrelated,
}

impl RelearnSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RelearnSource::Forget => "forget",
            RelearnSource::RetainSubset => "retain_subset",
            RelearnSource::Unrelated => "unrelated",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            RelearnSource::Forget => Domain::Forget,
            RelearnSource::RetainSubset => Domain::Retain,
            RelearnSource::Unrelated => Domain::Unrelated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelearnConfig {
    pub source: RelearnSource,
    /// Sequences available to relearning; `None` means `|D_f|`.
    pub budget: Option<usize>,
    pub peak_lr: f64,
    /// `None` means 10% of the base training steps.
    pub steps: Option<usize>,
    pub batch_sequences: usize,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        Self {
            source: RelearnSource::Forget,
            budget: None,
            peak_lr: 1e-3,
            steps: None,
            batch_sequences: default_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub size: usize,
    pub mia_k: f64,
    pub sources: Vec<Domain>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            size: 256,
            mia_k: 0.2,
            sources: vec![Domain::Forget, Domain::Retain],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub seeds: Vec<u64>,
    pub base: BaseTrainConfig,
    pub unlearn: UnlearnConfig,
    pub relearn: RelearnConfig,
    pub thresholds: RegimeThresholds,
    pub probe: ProbeConfig,
    pub adamw: AdamWConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            seeds: vec![0],
            base: BaseTrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            relearn: RelearnConfig::default(),
            thresholds: RegimeThresholds::default(),
            probe: ProbeConfig::default(),
            adamw: AdamWConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["reversible", "irreversible"];

impl ExperimentConfig {
    /// Named configurations: `reversible` (mild single GA request) and
    /// `irreversible` (aggressive continual GA over many requests).
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            seeds: vec![12, 22, 32, 42],
            ..Self::default()
        };
        match name {
            "reversible" => {
                cfg.unlearn.peak_lr = 1e-3;
                cfg.unlearn.steps_per_request = 25;
                cfg.relearn.peak_lr = 1e-3;
                cfg.relearn.steps = Some(10);
            }
            "irreversible" => {
                cfg.unlearn.peak_lr = 1e-2;
                cfg.unlearn.n_requests = 32;
                cfg.unlearn.steps_per_request = 20;
                cfg.unlearn.forget_batch_sequences = 1;
                cfg.relearn.peak_lr = 1e-3;
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}` (expected one of {PRESETS:?})"),
                ))
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.thresholds.validate()?;
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Error::config(
                "corpus.vocab_size",
                "must equal model.vocab_size",
            ));
        }
        if self.corpus.context_len != self.model.context_len {
            return Err(Error::config(
                "corpus.context_len",
                "must equal model.context_len",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let positive = [
            ("base.peak_lr", self.base.peak_lr),
            ("unlearn.peak_lr", self.unlearn.peak_lr),
            ("relearn.peak_lr", self.relearn.peak_lr),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.base.min_retain_accuracy) {
            return Err(Error::config("base.min_retain_accuracy", "must lie in [0, 1]"));
        }
        for (field, v) in [
            ("base.batch_sequences", self.base.batch_sequences),
            ("unlearn.forget_batch_sequences", self.unlearn.forget_batch_sequences),
            ("unlearn.retain_batch_sequences", self.unlearn.retain_batch_sequences),
            ("relearn.batch_sequences", self.relearn.batch_sequences),
            ("probe.size", self.probe.size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.unlearn.n_requests == 0 {
            return Err(Error::config("unlearn.n_requests", "must be at least 1"));
        }
        if self.unlearn.n_requests > self.corpus.forget_sequences {
            return Err(Error::config(
                "unlearn.n_requests",
                "cannot exceed the number of forget sequences",
            ));
        }
        self.unlearn
            .loss
            .validate()
            .map_err(|e| Error::config("unlearn.loss", e.to_string()))?;
        let budget = self.relearn_budget();
        if budget > self.corpus.forget_sequences {
            return Err(Error::config(
                "relearn.budget",
                "relearning budget is size-matched to the forget set and may not exceed it",
            ));
        }
        let available = match self.relearn.source {
            RelearnSource::Forget => self.corpus.forget_sequences,
            RelearnSource::RetainSubset => self.corpus.retain_sequences,
            RelearnSource::Unrelated => self.corpus.unrelated_sequences,
        };
        if budget > available {
            return Err(Error::config(
                "relearn.budget",
                format!("source has only {available} sequences"),
            ));
        }
        if !(self.probe.mia_k > 0.0 && self.probe.mia_k <= 1.0) {
            return Err(Error::config("probe.mia_k", "must lie in (0, 1]"));
        }
        if self.probe.sources.is_empty() {
            return Err(Error::config("probe.sources", "need at least one probe source"));
        }
        Ok(())
    }

    pub fn relearn_budget(&self) -> usize {
        self.relearn.budget.unwrap_or(self.corpus.forget_sequences)
    }

    pub fn relearn_steps(&self) -> usize {
        self.relearn
            .steps
            .unwrap_or_else(|| (self.base.steps as f64 * 0.1).round() as usize)
    }

    /// Copy restricted to one seed, as stored in a run directory.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

// ------------------------------------------------------------ batching ----

/// Epoch-wise shuffled minibatches of sequence indices, reshuffled per
/// `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::EmptyInput);
        }
        let mut s = Self {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(self.seed, "epoch", self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn batch_of(corpus: &Corpus, indices: &[usize], context_len: usize) -> Result<Batch> {
    let seqs: Vec<&[u32]> = indices
        .iter()
        .map(|&i| corpus.sequences[i].as_slice())
        .collect();
    Batch::from_sequences(&seqs, context_len)
}

fn diverged(phase: &str, e: Error) -> Error {
    match e {
        Error::Diverged { step, .. } => Error::Diverged {
            phase: phase.to_string(),
            step,
        },
        other => other,
    }
}

// -------------------------------------------------------------- phases ----

/// Training set of the base model: `D_f ∪ D_r ∪ D_u`.
pub fn base_training_corpus(corpora: &SyntheticCorpora) -> Vec<Vec<u32>> {
    corpora
        .forget
        .sequences
        .iter()
        .chain(&corpora.retain.sequences)
        .chain(&corpora.unrelated.sequences)
        .cloned()
        .collect()
}

/// Trains `θ0` with cross-entropy and checks the retain-accuracy floor.
pub fn train_base(cfg: &ExperimentConfig, corpora: &SyntheticCorpora, seed: u64) -> Result<TinyLM> {
    let mut model = TinyLM::new(cfg.model.clone(), derive_seed(seed, "init"))?;
    let data = base_training_corpus(corpora);
    let c = cfg.model.context_len;
    let mut stream = BatchStream::new(data.len(), cfg.base.batch_sequences, derive_seed(seed, "base"))?;
    let mut opt = OptimizerState::new(&model, cfg.base.peak_lr, cfg.base.steps, cfg.adamw.clone());
    for _ in 0..cfg.base.steps {
        let idx = stream.next_indices();
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| data[i].as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, c)?;
        let g = model.loss_and_grads(&batch)?.grads;
        opt.apply(&mut model, g, None).map_err(|e| diverged("train", e))?;
    }
    let acc = model.evaluate(&corpora.retain)?.accuracy;
    if acc < cfg.base.min_retain_accuracy {
        return Err(Error::Underfit {
            accuracy: acc,
            floor: cfg.base.min_retain_accuracy,
        });
    }
    Ok(model)
}

/// Disjoint cover of `0..n_forget` into `n_requests` shards. The order is a
/// seeded shuffle; indices within each shard are sorted.
pub fn partition_requests(n_forget: usize, n_requests: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_requests == 0 || n_requests > n_forget {
        return Err(Error::Invalid(format!(
            "cannot split {n_forget} forget sequences into {n_requests} requests"
        )));
    }
    let mut order: Vec<usize> = (0..n_forget).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "requests"));
    order.shuffle(&mut rng);
    let mut shards = Vec::with_capacity(n_requests);
    for r in 0..n_requests {
        let lo = r * n_forget / n_requests;
        let hi = (r + 1) * n_forget / n_requests;
        let mut shard = order[lo..hi].to_vec();
        shard.sort_unstable();
        shards.push(shard);
    }
    Ok(shards)
}

fn request_order_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    derive_indexed(seed, "request-order", cfg.unlearn.request_order_seed)
}

/// One unlearning request: `M^(t) = U(M^(t−1), D_f^(t))`, with a fresh
/// optimizer and schedule.
pub fn unlearn_request(
    model: &TinyLM,
    reference: &ReferenceModel,
    shard: &Corpus,
    retain: &Corpus,
    cfg: &ExperimentConfig,
    seed: u64,
    request: usize,
) -> Result<TinyLM> {
    let u = &cfg.unlearn;
    let c = cfg.model.context_len;
    let steps = u.steps_per_request;
    let mut out = model.clone();
    if steps == 0 {
        return Ok(out);
    }
    let rseed = derive_indexed(seed, "unlearn", request as u64);
    let mut forget_stream = BatchStream::new(shard.len(), u.forget_batch_sequences, derive_seed(rseed, "forget"))?;
    let mut retain_stream = BatchStream::new(retain.len(), u.retain_batch_sequences, derive_seed(rseed, "retain"))?;
    let needs_retain = u.loss.method.needs_retain();
    let mask = if u.loss.method == Method::GaGdMaskedWagle {
        let all: Vec<usize> = (0..shard.len()).collect();
        Some(saliency_mask(model, &batch_of(shard, &all, c)?, u.loss.mask_fraction)?)
    } else {
        None
    };
    let mut opt = OptimizerState::new(&out, u.peak_lr, steps, cfg.adamw.clone());
    let phase = format!("unlearn request {}", request + 1);
    for step in 0..steps {
        let forget = batch_of(shard, &forget_stream.next_indices(), c)?;
        let retain_batch = if needs_retain {
            Some(batch_of(retain, &retain_stream.next_indices(), c)?)
        } else {
            None
        };
        let inputs = ObjectiveInputs {
            forget: &forget,
            retain: retain_batch.as_ref(),
            reference: Some(reference),
            mask: mask.as_ref(),
            label_seed: derive_indexed(derive_seed(rseed, "rlabel") ^ u.loss.seed, "step", step as u64),
        };
        let value = evaluate_objective(&u.loss, &out, &inputs)?;
        opt.apply(&mut out, value.grads, mask.as_ref())
            .map_err(|e| diverged(&phase, e))?;
    }
    Ok(out)
}

/// A single request covering all of `D_f`.
pub fn unlearn_single(
    theta0: &TinyLM,
    corpora: &SyntheticCorpora,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TinyLM> {
    let reference = ReferenceModel::freeze(theta0);
    unlearn_request(theta0, &reference, &corpora.forget, &corpora.retain, cfg, seed, 0)
}

/// Sequential requests over a partition of `D_f`; returns `M^(1..N)`.
/// The frozen reference is always `θ0`.
pub fn unlearn_continual(
    theta0: &TinyLM,
    corpora: &SyntheticCorpora,
    partition: &[Vec<usize>],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<TinyLM>> {
    let reference = ReferenceModel::freeze(theta0);
    let mut states = Vec::with_capacity(partition.len());
    let mut current = theta0.clone();
    for (t, shard) in partition.iter().enumerate() {
        let shard_corpus = corpora.forget.subset(shard);
        current = unlearn_request(&current, &reference, &shard_corpus, &corpora.retain, cfg, seed, t)?;
        states.push(current.clone());
    }
    Ok(states)
}

/// Record of the data used for relearning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelearnLog {
    pub source: RelearnSource,
    pub budget: usize,
    pub steps: usize,
    /// Indices into the source corpus available to relearning.
    pub sequence_ids: Vec<usize>,
    /// Per step, the sequence ids in its batch.
    pub batches: Vec<Vec<usize>>,
}

/// Briefly fine-tunes `θu` with plain cross-entropy on at most `budget`
/// sequences of the chosen source.
pub fn relearn(
    theta_u: &TinyLM,
    corpora: &SyntheticCorpora,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(TinyLM, RelearnLog)> {
    let r = &cfg.relearn;
    let budget = cfg.relearn_budget();
    let steps = cfg.relearn_steps();
    if budget > corpora.forget.len() {
        return Err(Error::config("relearn.budget", "exceeds |D_f|"));
    }
    let source = corpora.by_domain(r.source.domain());
    if budget > source.len() {
        return Err(Error::config("relearn.budget", "exceeds the source corpus"));
    }
    let mut ids: Vec<usize> = (0..source.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "relearn-subset"));
    ids.shuffle(&mut rng);
    ids.truncate(budget);
    ids.sort_unstable();
    let mut log = RelearnLog {
        source: r.source,
        budget,
        steps,
        sequence_ids: ids.clone(),
        batches: Vec::new(),
    };
    let mut model = theta_u.clone();
    if budget == 0 || steps == 0 {
        log.steps = 0;
        return Ok((model, log));
    }
    let data = source.subset(&ids);
    let mut stream = BatchStream::new(data.len(), r.batch_sequences, derive_seed(seed, "relearn"))?;
    let mut opt = OptimizerState::new(&model, r.peak_lr, steps, cfg.adamw.clone());
    for _ in 0..steps {
        let local = stream.next_indices();
        log.batches.push(local.iter().map(|&i| ids[i]).collect());
        let batch = batch_of(&data, &local, cfg.model.context_len)?;
        let g = model.loss_and_grads(&batch)?.grads;
        opt.apply(&mut model, g, None).map_err(|e| diverged("relearn", e))?;
    }
    Ok((model, log))
}

// ------------------------------------------------------------- records ----

pub const PHASE_ORIGINAL: &str = "original";
pub const PHASE_UNLEARNED: &str = "unlearned";
pub const PHASE_RELEARNED: &str = "relearned";

pub fn request_phase(t: usize) -> String {
    format!("request_{t}")
}

/// One `(phase, corpus, metric)` value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub corpus: Domain,
    pub metric: String,
    pub value: f64,
}

/// Accuracy, perplexity and (for forget/retain) MIA AUC of one model state.
pub fn phase_metrics(
    phase: &str,
    model: &TinyLM,
    corpora: &SyntheticCorpora,
    mia_k: f64,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for domain in Domain::ALL {
        let ev = model.evaluate(corpora.by_domain(domain))?;
        let mut push = |metric: &str, value: f64| {
            out.push(MetricRecord {
                phase: phase.to_string(),
                corpus: domain,
                metric: metric.to_string(),
                value,
            })
        };
        push("accuracy", ev.accuracy);
        push("perplexity", ev.perplexity);
        if let Some(holdout) = corpora.holdout(domain) {
            let mia = min_k_mia(model, corpora.by_domain(domain), holdout, mia_k)?;
            push("mia_auc", mia.auc);
        }
    }
    Ok(out)
}

/// Accuracy-only snapshot taken after each continual request.
pub fn request_metrics(t: usize, model: &TinyLM, corpora: &SyntheticCorpora) -> Result<Vec<MetricRecord>> {
    let phase = request_phase(t);
    [Domain::Forget, Domain::Retain]
        .into_iter()
        .map(|d| {
            Ok(MetricRecord {
                phase: phase.clone(),
                corpus: d,
                metric: "accuracy".into(),
                value: model.evaluate(corpora.by_domain(d))?.accuracy,
            })
        })
        .collect()
}

pub fn find_metric(records: &[MetricRecord], phase: &str, corpus: Domain, metric: &str) -> Result<f64> {
    records
        .iter()
        .find(|r| r.phase == phase && r.corpus == corpus && r.metric == metric)
        .map(|r| r.value)
        .ok_or_else(|| Error::MissingPhase(format!("{phase}/{corpus}/{metric}")))
}

/// Regime verdict from stored accuracy records.
pub fn verdict_from_metrics(records: &[MetricRecord], t: &RegimeThresholds) -> Result<RegimeVerdict> {
    let task = |d: Domain| -> Result<TaskAccuracies> {
        Ok(TaskAccuracies {
            original: find_metric(records, PHASE_ORIGINAL, d, "accuracy")?,
            unlearned: find_metric(records, PHASE_UNLEARNED, d, "accuracy")?,
            relearned: find_metric(records, PHASE_RELEARNED, d, "accuracy")?,
        })
    };
    Ok(classify(&compute_deltas(&task(Domain::Forget)?, &task(Domain::Retain)?)?, t))
}

/// Per-layer diagnostics of one phase against `θ0`, on one probe source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub phase: String,
    pub probe_source: Domain,
    #[serde(flatten)]
    pub layer: LayerDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub probe_source: Domain,
    pub mean_pca_distance: f64,
    /// Min-k% AUC with the probe source as members; `None` for unrelated.
    pub mia_auc: Option<f64>,
    pub k_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherRecord {
    pub phase: String,
    pub probe_source: Domain,
    pub total_mean: f64,
    pub groups: Vec<LayerFisher>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunDiagnostics {
    pub layers: Vec<DiagnosticRecord>,
    pub summaries: Vec<PhaseSummary>,
    pub fisher: Vec<FisherRecord>,
}

/// Diagnostics of each `(phase, model)` against the first entry (`θ0`).
pub fn diagnose_phases(
    phases: &[(&str, &TinyLM)],
    corpora: &SyntheticCorpora,
    cfg: &ExperimentConfig,
) -> Result<RunDiagnostics> {
    let (_, theta0) = phases.first().ok_or(Error::EmptyInput)?;
    let mut out = RunDiagnostics {
        layers: Vec::new(),
        summaries: Vec::new(),
        fisher: Vec::new(),
    };
    for &source in &cfg.probe.sources {
        let probe = ProbeSet::from_corpus(corpora.by_domain(source), cfg.probe.size, cfg.model.context_len)?;
        let base = probe.activations(theta0)?;
        for &(phase, model) in phases {
            let acts = probe.activations(model)?;
            let mut layers = compare_activations(&base, &acts)?;
            let fisher = fisher_diagonal(model, &probe.batch, FisherLabels::Empirical)?;
            for l in layers.iter_mut() {
                let name = format!("hidden.{}", l.layer);
                l.fisher_mean = fisher.layers.iter().find(|g| g.name == name).map(|g| g.mean);
            }
            let mia_auc = match corpora.holdout(source) {
                Some(h) => Some(min_k_mia(model, corpora.by_domain(source), h, cfg.probe.mia_k)?.auc),
                None => None,
            };
            out.summaries.push(PhaseSummary {
                phase: phase.to_string(),
                probe_source: source,
                mean_pca_distance: layers_mean_pca_distance(&layers)?,
                mia_auc,
                k_fraction: cfg.probe.mia_k,
            });
            out.fisher.push(FisherRecord {
                phase: phase.to_string(),
                probe_source: source,
                total_mean: fisher.mean,
                groups: fisher.layers,
            });
            out.layers.extend(layers.into_iter().map(|layer| DiagnosticRecord {
                phase: phase.to_string(),
                probe_source: source,
                layer,
            }));
        }
    }
    Ok(out)
}

/// Complete record of one train → unlearn → relearn pipeline.
#[derive(Debug, Clone)]
pub struct ForgettingRun {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub partition: Vec<Vec<usize>>,
    pub theta0: TinyLM,
    pub theta_u: TinyLM,
    pub theta_r: TinyLM,
    pub relearn_log: RelearnLog,
    pub metrics: Vec<MetricRecord>,
    pub diagnostics: RunDiagnostics,
    pub verdict: RegimeVerdict,
}

impl ForgettingRun {
    pub fn summary(&self, phase: &str, source: Domain) -> Option<&PhaseSummary> {
        self.diagnostics
            .summaries
            .iter()
            .find(|s| s.phase == phase && s.probe_source == source)
    }

    pub fn metric(&self, phase: &str, corpus: Domain, metric: &str) -> Result<f64> {
        find_metric(&self.metrics, phase, corpus, metric)
    }
}

/// Output of the unlearning stage.
#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub partition: Vec<Vec<usize>>,
    pub theta_u: TinyLM,
    pub request_metrics: Vec<MetricRecord>,
}

/// Continual unlearning per the config, with accuracy snapshots after every
/// request when there is more than one.
pub fn unlearn_stage(
    theta0: &TinyLM,
    corpora: &SyntheticCorpora,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<UnlearnOutcome> {
    let partition = partition_requests(
        corpora.forget.len(),
        cfg.unlearn.n_requests,
        request_order_seed(cfg, seed),
    )?;
    let states = unlearn_continual(theta0, corpora, &partition, cfg, seed)?;
    let mut snapshots = Vec::new();
    if states.len() > 1 {
        for (t, m) in states.iter().enumerate() {
            snapshots.extend(request_metrics(t + 1, m, corpora)?);
        }
    }
    Ok(UnlearnOutcome {
        partition,
        theta_u: states.last().expect("at least one request").clone(),
        request_metrics: snapshots,
    })
}

/// Metrics, diagnostics and verdict for three stored model states.
pub fn evaluate_states(
    cfg: &ExperimentConfig,
    corpora: &SyntheticCorpora,
    theta0: &TinyLM,
    theta_u: &TinyLM,
    theta_r: &TinyLM,
    request_metrics: &[MetricRecord],
) -> Result<(Vec<MetricRecord>, RunDiagnostics, RegimeVerdict)> {
    let mut metrics = phase_metrics(PHASE_ORIGINAL, theta0, corpora, cfg.probe.mia_k)?;
    metrics.extend(request_metrics.iter().cloned());
    metrics.extend(phase_metrics(PHASE_UNLEARNED, theta_u, corpora, cfg.probe.mia_k)?);
    metrics.extend(phase_metrics(PHASE_RELEARNED, theta_r, corpora, cfg.probe.mia_k)?);
    let diagnostics = diagnose_phases(
        &[
            (PHASE_ORIGINAL, theta0),
            (PHASE_UNLEARNED, theta_u),
            (PHASE_RELEARNED, theta_r),
        ],
        corpora,
        cfg,
    )?;
    let verdict = verdict_from_metrics(&metrics, &cfg.thresholds)?;
    Ok((metrics, diagnostics, verdict))
}

/// Full pipeline for one seed.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64) -> Result<ForgettingRun> {
    cfg.validate()?;
    let corpora = make_synthetic_corpora(seed, &cfg.corpus)?;
    let theta0 = train_base(cfg, &corpora, seed)?;
    let outcome = unlearn_stage(&theta0, &corpora, cfg, seed)?;
    let (theta_r, relearn_log) = relearn(&outcome.theta_u, &corpora, cfg, seed)?;
    let (metrics, diagnostics, verdict) = evaluate_states(
        cfg,
        &corpora,
        &theta0,
        &outcome.theta_u,
        &theta_r,
        &outcome.request_metrics,
    )?;
    Ok(ForgettingRun {
        config: cfg.for_seed(seed),
        seed,
        partition: outcome.partition,
        theta0,
        theta_u: outcome.theta_u,
        theta_r,
        relearn_log,
        metrics,
        diagnostics,
        verdict,
    })
}

/// Independent runs over `cfg.seeds`, executed concurrently; results keep
/// seed order.
pub fn seed_sweep(cfg: &ExperimentConfig) -> Result<Vec<ForgettingRun>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_pipeline(cfg, s)).collect()
}

/// Sample mean and standard deviation (divisor `n − 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden = vec![16, 16];
        cfg.model.embed_dim = 8;
        cfg.corpus.forget_sequences = 8;
        cfg.corpus.retain_sequences = 8;
        cfg.corpus.unrelated_sequences = 8;
        cfg.corpus.holdout_sequences = 8;
        cfg.base.steps = 30;
        cfg.base.min_retain_accuracy = 0.0;
        cfg.unlearn.steps_per_request = 4;
        cfg.probe.size = 16;
        cfg
    }

    #[test]
    fn partition_is_disjoint_cover() {
        let p = partition_requests(32, 5, 7).unwrap();
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        assert!(p.iter().all(|s| s.len() >= 6));
        assert!(partition_requests(3, 4, 0).is_err());
        assert_eq!(partition_requests(5, 1, 9).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn batch_stream_visits_everything_each_epoch() {
        let mut s = BatchStream::new(10, 5, 3).unwrap();
        let mut first: Vec<usize> = [s.next_indices(), s.next_indices()].concat();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let a = s.next_indices();
        let mut t = BatchStream::new(10, 5, 3).unwrap();
        t.next_indices();
        t.next_indices();
        assert_eq!(a, t.next_indices());
    }

    #[test]
    fn underfit_base_model_is_reported() {
        let mut cfg = small_config();
        cfg.base.steps = 1;
        cfg.base.min_retain_accuracy = 0.99;
        let corpora = make_synthetic_corpora(0, &cfg.corpus).unwrap();
        assert!(matches!(
            train_base(&cfg, &corpora, 0),
            Err(Error::Underfit { .. })
        ));
    }

    #[test]
    fn zero_steps_and_zero_budget_are_identity() {
        let mut cfg = small_config();
        let corpora = make_synthetic_corpora(1, &cfg.corpus).unwrap();
        let theta0 = train_base(&cfg, &corpora, 1).unwrap();
        cfg.unlearn.steps_per_request = 0;
        assert_eq!(unlearn_single(&theta0, &corpora, &cfg, 1).unwrap(), theta0);
        cfg.relearn.budget = Some(0);
        let (r, log) = relearn(&theta0, &corpora, &cfg, 1).unwrap();
        assert_eq!(r, theta0);
        assert!(log.batches.is_empty());
    }

    #[test]
    fn single_request_stream_equals_single_unlearning() {
        let cfg = small_config();
        let corpora = make_synthetic_corpora(2, &cfg.corpus).unwrap();
        let theta0 = train_base(&cfg, &corpora, 2).unwrap();
        let single = unlearn_single(&theta0, &corpora, &cfg, 2).unwrap();
        let stream = unlearn_stage(&theta0, &corpora, &cfg, 2).unwrap();
        assert_eq!(stream.theta_u, single);
        assert_ne!(single, theta0);
    }

    #[test]
    fn continual_telescopes_over_requests() {
        let mut cfg = small_config();
        cfg.unlearn.n_requests = 3;
        let corpora = make_synthetic_corpora(3, &cfg.corpus).unwrap();
        let theta0 = train_base(&cfg, &corpora, 3).unwrap();
        let partition = partition_requests(8, 3, 11).unwrap();
        let states = unlearn_continual(&theta0, &corpora, &partition, &cfg, 3).unwrap();
        let reference = ReferenceModel::freeze(&theta0);
        let mut m = theta0.clone();
        for (t, shard) in partition.iter().enumerate() {
            m = unlearn_request(&m, &reference, &corpora.forget.subset(shard), &corpora.retain, &cfg, 3, t)
                .unwrap();
        }
        assert_eq!(&m, states.last().unwrap());
    }

    #[test]
    fn relearn_uses_only_declared_source_within_budget() {
        let mut cfg = small_config();
        cfg.relearn.source = RelearnSource::Unrelated;
        cfg.relearn.budget = Some(5);
        cfg.relearn.steps = Some(6);
        cfg.relearn.batch_sequences = 2;
        let corpora = make_synthetic_corpora(4, &cfg.corpus).unwrap();
        let theta0 = train_base(&cfg, &corpora, 4).unwrap();
        let (_, log) = relearn(&theta0, &corpora, &cfg, 4).unwrap();
        assert_eq!(log.sequence_ids.len(), 5);
        assert_eq!(log.batches.len(), 6);
        for b in &log.batches {
            assert!(b.iter().all(|i| log.sequence_ids.contains(i)));
        }
        cfg.relearn.budget = Some(9);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_method_runs_through_the_pipeline() {
        for method in Method::ALL {
            let mut cfg = small_config();
            cfg.unlearn.loss = UnlearnLossSpec::new(method);
            cfg.unlearn.n_requests = 2;
            let run = run_pipeline(&cfg, 5).unwrap();
            assert_eq!(run.partition.len(), 2);
            assert!(run.metric(&request_phase(2), Domain::Forget, "accuracy").is_ok());
            let l = cfg.model.hidden.len();
            assert_eq!(run.diagnostics.layers.len(), 2 * 3 * l);
            let own = run.summary(PHASE_ORIGINAL, Domain::Forget).unwrap();
            assert_eq!(own.mean_pca_distance, 0.0);
        }
    }

    #[test]
    fn verdict_needs_all_phases() {
        let recs = vec![MetricRecord {
            phase: PHASE_ORIGINAL.into(),
            corpus: Domain::Forget,
            metric: "accuracy".into(),
            value: 0.5,
        }];
        assert!(matches!(
            verdict_from_metrics(&recs, &RegimeThresholds::default()),
            Err(Error::MissingPhase(_))
        ));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.n_requests = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.vocab_size = 32;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::preset("nope").is_err());
        for p in PRESETS {
            ExperimentConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
