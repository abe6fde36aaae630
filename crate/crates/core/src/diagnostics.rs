//! Representation-level diagnostics comparing model states on a fixed probe
//! set: PCA similarity and shift, mean PCA distance, linear CKA, the
//! empirical Fisher diagonal, min-k% membership inference, and a weight
//! perturbation probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Domain};
use crate::error::{Error, Result};
use crate::linalg::{center_columns, cosine, dot, frobenius_norm, sym_top_eigs, Matrix};
use crate::model::{Batch, ParamSet, TinyLM};
use crate::seed::derive_indexed;

/// Fixed probe windows shared by every model state in a comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub source: Domain,
    pub batch: Batch,
}

impl ProbeSet {
    /// Up to `count` windows, evenly spaced over all windows of `corpus`.
    pub fn from_corpus(corpus: &Corpus, count: usize, context_len: usize) -> Result<Self> {
        let all = Batch::from_sequences(&corpus.sequences, context_len)?;
        if all.is_empty() || count == 0 {
            return Err(Error::EmptyInput);
        }
        let n = all.len();
        let picks: Vec<usize> = if count >= n {
            (0..n).collect()
        } else {
            (0..count).map(|i| i * n / count).collect()
        };
        Ok(Self {
            source: corpus.domain,
            batch: all.select(&picks),
        })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// Hidden activations of `model` on the probe, one matrix per layer.
    pub fn activations(&self, model: &TinyLM) -> Result<Vec<Matrix>> {
        Ok(model
            .forward(&self.batch, true)?
            .activations
            .expect("captured"))
    }
}

// ---------------------------------------------------------------- PCA ----

const EIG_TOL: f64 = 1e-10;
const EIG_MAX_ITER: usize = 100_000;

/// Top-two principal structure of one layer's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPca {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Column means of the raw activations.
    pub mean: Vec<f64>,
    /// Mean row projection onto `(c1, c2)`.
    pub mean_projection: [f64; 2],
    pub degenerate_gap: bool,
}

impl LayerPca {
    pub fn eigengap(&self) -> f64 {
        self.lambda1 - self.lambda2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaState {
    pub layers: Vec<LayerPca>,
}

/// PCA of one activation matrix (rows are probe windows).
pub fn layer_pca(acts: &Matrix, layer: usize) -> Result<LayerPca> {
    if acts.rows() < 3 {
        return Err(Error::Invalid(format!(
            "PCA needs at least 3 probe rows, got {}",
            acts.rows()
        )));
    }
    if acts.cols() < 2 {
        return Err(Error::Invalid(format!("layer {layer} is narrower than 2")));
    }
    let centered = center_columns(acts)?;
    let raw_scale = acts.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let spread = centered.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if spread <= 1e-12 * raw_scale.max(1.0) {
        return Err(Error::CollapsedLayer(layer));
    }
    let cov = centered
        .matmul_tn(&centered)?
        .scaled(1.0 / (acts.rows() - 1) as f64);
    let eig = sym_top_eigs(&cov, 2, EIG_TOL, EIG_MAX_ITER)?;
    let mean = acts.column_means();
    let c1 = eig.pairs[0].vector.clone();
    let c2 = eig.pairs[1].vector.clone();
    let mean_projection = [dot(&mean, &c1), dot(&mean, &c2)];
    Ok(LayerPca {
        c1,
        c2,
        lambda1: eig.pairs[0].value,
        lambda2: eig.pairs[1].value,
        mean,
        mean_projection,
        degenerate_gap: eig.degenerate_gap,
    })
}

pub fn pca_state_from_activations(acts: &[Matrix]) -> Result<PcaState> {
    Ok(PcaState {
        layers: acts
            .iter()
            .enumerate()
            .map(|(i, a)| layer_pca(a, i))
            .collect::<Result<_>>()?,
    })
}

pub fn pca_state(model: &TinyLM, probe: &ProbeSet) -> Result<PcaState> {
    pca_state_from_activations(&probe.activations(model)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub cosine: f64,
    pub abs: f64,
    pub degenerate_gap: bool,
}

/// Cosine between first principal directions, per layer.
pub fn pca_similarity(orig: &PcaState, upd: &PcaState) -> Result<Vec<Similarity>> {
    if orig.layers.len() != upd.layers.len() {
        return Err(Error::Shape("layer counts differ".into()));
    }
    orig.layers
        .iter()
        .zip(&upd.layers)
        .map(|(o, u)| {
            let c = cosine(&o.c1, &u.c1)?;
            Ok(Similarity {
                cosine: c,
                abs: c.abs(),
                degenerate_gap: o.degenerate_gap || u.degenerate_gap,
            })
        })
        .collect()
}

/// Displacement of the activation mean, projected on the original state's
/// `(c1, c2)` basis.
pub fn shift_in_basis(orig: &LayerPca, upd_mean: &[f64]) -> Result<[f64; 2]> {
    if upd_mean.len() != orig.mean.len() {
        return Err(Error::Shape("layer widths differ".into()));
    }
    let p_upd = [dot(upd_mean, &orig.c1), dot(upd_mean, &orig.c2)];
    let p_orig = [dot(&orig.mean, &orig.c1), dot(&orig.mean, &orig.c2)];
    Ok([p_upd[0] - p_orig[0], p_upd[1] - p_orig[1]])
}

pub fn pca_shift(orig: &PcaState, upd: &PcaState) -> Result<Vec<[f64; 2]>> {
    if orig.layers.len() != upd.layers.len() {
        return Err(Error::Shape("layer counts differ".into()));
    }
    orig.layers
        .iter()
        .zip(&upd.layers)
        .map(|(o, u)| shift_in_basis(o, &u.mean))
        .collect()
}

/// Layer average of `‖shift‖₂`.
pub fn mean_pca_distance(shifts: &[[f64; 2]]) -> Result<f64> {
    if shifts.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(shifts.iter().map(|s| s[0].hypot(s[1])).sum::<f64>() / shifts.len() as f64)
}

// ---------------------------------------------------------------- CKA ----

/// Linear CKA between two activation matrices with the same rows.
///
/// Uses `Tr(K̃x K̃y) = ‖Ycᵀ Xc‖²_F` on column-centered inputs, which avoids
/// forming the `n × n` Gram matrices.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Shape(format!("{} vs {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::Invalid("CKA needs at least 2 rows".into()));
    }
    let xc = center_columns(x)?;
    let yc = center_columns(y)?;
    let xx = frobenius_norm(&xc.matmul_tn(&xc)?);
    let yy = frobenius_norm(&yc.matmul_tn(&yc)?);
    if xx == 0.0 || yy == 0.0 || !xx.is_finite() || !yy.is_finite() {
        return Err(Error::DegenerateActivations);
    }
    let xy = frobenius_norm(&yc.matmul_tn(&xc)?);
    Ok((xy * xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Centered Gram matrix `H X Xᵀ H`.
pub fn centered_gram(x: &Matrix) -> Result<Matrix> {
    let xc = center_columns(x)?;
    xc.matmul_nt(&xc)
}

// ------------------------------------------------------------- Fisher ----

pub const FISHER_BINS: usize = 64;
pub const FISHER_LO: f64 = 1e-20;
pub const FISHER_HI: f64 = 1e2;

/// Which labels the log-likelihood gradient is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FisherLabels {
    /// Observed next tokens (empirical Fisher).
    Empirical,
    /// Labels sampled from the model's own predictive distribution.
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFisher {
    pub name: String,
    pub param_count: usize,
    pub mean: f64,
    pub histogram: Vec<u64>,
}

impl LayerFisher {
    /// Index of the most populated bin (lowest index on ties).
    pub fn peak_bin(&self) -> usize {
        let max = self.histogram.iter().copied().max().unwrap_or(0);
        self.histogram.iter().position(|&c| c == max).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherSummary {
    pub diagonal: ParamSet,
    pub layers: Vec<LayerFisher>,
    /// `F̄ = (1/P) Σ F_ii`
    pub mean: f64,
    pub param_count: usize,
}

/// Lower edges of the 64 log-spaced bins plus the final upper edge.
pub fn fisher_bin_edges() -> Vec<f64> {
    let (lo, hi) = (FISHER_LO.log10(), FISHER_HI.log10());
    (0..=FISHER_BINS)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / FISHER_BINS as f64))
        .collect()
}

/// Bin of a non-negative value; out-of-range values land in the end bins.
pub fn fisher_bin(v: f64) -> usize {
    if !(v > FISHER_LO) {
        return 0;
    }
    if v >= FISHER_HI {
        return FISHER_BINS - 1;
    }
    let (lo, hi) = (FISHER_LO.log10(), FISHER_HI.log10());
    (((v.log10() - lo) / (hi - lo)) * FISHER_BINS as f64).floor() as usize
}

/// Neumaier-compensated running sums, one per parameter.
struct CompensatedSums {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSums {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            comp: vec![0.0; n],
        }
    }

    #[inline]
    fn add(&mut self, i: usize, x: f64) {
        let s = self.sum[i];
        let t = s + x;
        if s.abs() >= x.abs() {
            self.comp[i] += (s - t) + x;
        } else {
            self.comp[i] += (x - t) + s;
        }
        self.sum[i] = t;
    }

    fn merge(&mut self, other: &CompensatedSums) {
        for i in 0..self.sum.len() {
            self.add(i, other.sum[i]);
            self.add(i, other.comp[i]);
        }
    }

    fn total(&self, i: usize) -> f64 {
        self.sum[i] + self.comp[i]
    }
}

const FISHER_CHUNK: usize = 16;

/// Diagonal of the Fisher information: mean over probe windows of the
/// squared gradient of `log p(y | x)`.
///
/// Windows are processed in fixed chunks (in parallel) and the compensated
/// partial sums merged in chunk order, so the result does not depend on the
/// thread count.
pub fn fisher_diagonal(
    model: &TinyLM,
    probe: &Batch,
    labels: FisherLabels,
) -> Result<FisherSummary> {
    if probe.is_empty() {
        return Err(Error::EmptyInput);
    }
    let p = model.params().len();
    let vocab = model.config().vocab_size;
    let indices: Vec<usize> = (0..probe.len()).collect();
    let partials: Vec<Result<CompensatedSums>> = indices
        .par_chunks(FISHER_CHUNK)
        .map(|chunk| {
            let mut acc = CompensatedSums::new(p);
            for &i in chunk {
                let mut window = probe.select(&[i]);
                if let FisherLabels::Sampled { seed } = labels {
                    let lp = model.forward(&window, false)?.log_probs;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_indexed(seed, "fisher", i as u64));
                    let u: f64 = rng.gen();
                    let mut cum = 0.0;
                    let mut y = vocab - 1;
                    for (j, l) in lp.row(0).iter().enumerate() {
                        cum += l.exp();
                        if u < cum {
                            y = j;
                            break;
                        }
                    }
                    window = window.with_targets(vec![y as u32])?;
                }
                let g = model.loss_and_grads(&window)?.grads;
                for (k, v) in g.iter().enumerate() {
                    acc.add(k, v * v);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = CompensatedSums::new(p);
    for part in partials {
        total.merge(&part?);
    }

    let n = probe.len() as f64;
    let mut diagonal = model.params().zeros_like();
    for (k, v) in diagonal.iter_mut().enumerate() {
        *v = (total.total(k) / n).max(0.0);
    }
    Ok(summarize_fisher(model, diagonal))
}

fn summarize_fisher(model: &TinyLM, diagonal: ParamSet) -> FisherSummary {
    let config = model.config();
    let layers = config
        .layer_groups()
        .into_iter()
        .map(|(name, tensors)| {
            let mut histogram = vec![0u64; FISHER_BINS];
            let mut sum = 0.0;
            let mut count = 0usize;
            for &t in &tensors {
                for &v in diagonal.tensor(t).data() {
                    histogram[fisher_bin(v)] += 1;
                    sum += v;
                    count += 1;
                }
            }
            LayerFisher {
                name,
                param_count: count,
                mean: sum / count.max(1) as f64,
                histogram,
            }
        })
        .collect();
    let param_count = diagonal.len();
    let mean = diagonal.iter().sum::<f64>() / param_count as f64;
    FisherSummary {
        diagonal,
        layers,
        mean,
        param_count,
    }
}

// ---------------------------------------------------------------- MIA ----

#[derive(Debug, Clone, PartialEq)]
pub struct MiaResult {
    pub k_fraction: f64,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub auc: f64,
    /// Sequences skipped for being shorter than the context.
    pub skipped: usize,
}

/// Mean of the lowest `⌈k·T⌉` token log-probabilities.
pub fn min_k_score(token_log_probs: &[f64], k: f64) -> f64 {
    let t = token_log_probs.len();
    let take = ((k * t as f64).ceil() as usize).clamp(1, t);
    let mut sorted = token_log_probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[..take].iter().sum::<f64>() / take as f64
}

/// Probability that a member outscores a non-member, ties counting one half
/// (Mann–Whitney U via average ranks).
pub fn auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; ties share their average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n, m) = (members.len() as f64, nonmembers.len() as f64);
    Ok(((rank_sum - n * (n + 1.0) / 2.0) / (n * m)).clamp(0.0, 1.0))
}

fn scores(model: &TinyLM, corpus: &Corpus, k: f64) -> Result<(Vec<f64>, usize)> {
    let c = model.config().context_len;
    let keep: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.sequences[i].len() > c)
        .collect();
    let skipped = corpus.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ev = model.evaluate(&corpus.subset(&keep))?;
    Ok((
        ev.sequence_log_probs
            .iter()
            .map(|lp| min_k_score(lp, k))
            .collect(),
        skipped,
    ))
}

/// Min-k% probability membership inference.
pub fn min_k_mia(
    model: &TinyLM,
    members: &Corpus,
    nonmembers: &Corpus,
    k: f64,
) -> Result<MiaResult> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Invalid("k fraction must lie in (0, 1]".into()));
    }
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (member_scores, s1) = scores(model, members, k)?;
    let (nonmember_scores, s2) = scores(model, nonmembers, k)?;
    let auc = auc(&member_scores, &nonmember_scores)?;
    Ok(MiaResult {
        k_fraction: k,
        member_scores,
        nonmember_scores,
        auc,
        skipped: s1 + s2,
    })
}

// ------------------------------------------------------ layer records ----

/// Per-layer comparison of an updated state against the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    /// `None` when the updated layer collapsed.
    pub pca_similarity: Option<f64>,
    pub pca_similarity_abs: Option<f64>,
    pub shift_pc1: f64,
    pub shift_pc2: f64,
    pub cka: Option<f64>,
    /// `λ1 − λ2` of the original state.
    pub eigengap: f64,
    pub degenerate_gap: bool,
    pub fisher_mean: Option<f64>,
}

impl LayerDiagnostics {
    pub fn shift(&self) -> [f64; 2] {
        [self.shift_pc1, self.shift_pc2]
    }
}

/// Compares two stacks of per-layer activations from the same probe set.
pub fn compare_activations(orig: &[Matrix], upd: &[Matrix]) -> Result<Vec<LayerDiagnostics>> {
    if orig.len() != upd.len() {
        return Err(Error::Shape(format!(
            "{} vs {} layers",
            orig.len(),
            upd.len()
        )));
    }
    orig.iter()
        .zip(upd)
        .enumerate()
        .map(|(i, (o, u))| {
            if o.shape() != u.shape() {
                return Err(Error::Shape(format!(
                    "layer {i}: {:?} vs {:?}",
                    o.shape(),
                    u.shape()
                )));
            }
            let po = layer_pca(o, i)?;
            let shift = shift_in_basis(&po, &u.column_means())?;
            let (sim, degenerate) = match layer_pca(u, i) {
                Ok(pu) => (
                    Some(cosine(&po.c1, &pu.c1)?),
                    po.degenerate_gap || pu.degenerate_gap,
                ),
                Err(Error::CollapsedLayer(_)) => (None, po.degenerate_gap),
                Err(e) => return Err(e),
            };
            let cka = match linear_cka(o, u) {
                Ok(v) => Some(v),
                Err(Error::DegenerateActivations) => None,
                Err(e) => return Err(e),
            };
            Ok(LayerDiagnostics {
                layer: i,
                pca_similarity: sim,
                pca_similarity_abs: sim.map(f64::abs),
                shift_pc1: shift[0],
                shift_pc2: shift[1],
                cka,
                eigengap: po.eigengap(),
                degenerate_gap: degenerate,
                fisher_mean: None,
            })
        })
        .collect()
}

pub fn layers_mean_pca_distance(layers: &[LayerDiagnostics]) -> Result<f64> {
    mean_pca_distance(&layers.iter().map(LayerDiagnostics::shift).collect::<Vec<_>>())
}

// -------------------------------------------------- perturbation probe ----

/// Which hidden weight matrices receive the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    Layer(usize),
    AllLayers,
}

/// `W̃_i = W_i + E_i` on the targeted hidden weights. `E` has i.i.d. Gaussian
/// entries rescaled so the concatenated perturbation has Frobenius norm
/// `budget`, split evenly (in squared norm) across targeted layers.
pub fn perturb_model(
    model: &TinyLM,
    target: PerturbTarget,
    budget: f64,
    seed: u64,
) -> Result<TinyLM> {
    if !budget.is_finite() || budget < 0.0 {
        return Err(Error::Invalid("perturbation budget must be finite and >= 0".into()));
    }
    let config = model.config();
    let layers: Vec<usize> = match target {
        PerturbTarget::Layer(l) if l < config.n_hidden() => vec![l],
        PerturbTarget::Layer(l) => {
            return Err(Error::Invalid(format!("no hidden layer {l}")));
        }
        PerturbTarget::AllLayers => (0..config.n_hidden()).collect(),
    };
    let per_layer = budget / (layers.len() as f64).sqrt();
    let mut params = model.params().clone();
    for &l in &layers {
        let t = config.hidden_weight_index(l);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, "perturb", l as u64));
        let n = params.tensor(t).data().len();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { per_layer / norm } else { 0.0 };
        for (w, e) in params.tensor_mut(t).data_mut().iter_mut().zip(&noise) {
            *w += scale * e;
        }
    }
    TinyLM::from_params(config.clone(), model.seed(), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPoint {
    pub budget: f64,
    /// Realized Frobenius norm of the weight change.
    pub e_norm: f64,
    /// Layer mean of `1 − |cos|`.
    pub one_minus_similarity: f64,
    pub mean_pca_distance: f64,
    /// Layer mean of `1 − CKA`.
    pub one_minus_cka: f64,
    /// Layer mean of `‖K̃_Y − K̃_X‖_F`.
    pub delta_gram: f64,
    pub delta_fisher_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub target: PerturbTarget,
    pub baseline: PerturbationPoint,
    pub points: Vec<PerturbationPoint>,
}

fn probe_point(
    model: &TinyLM,
    perturbed: &TinyLM,
    probe: &ProbeSet,
    base_acts: &[Matrix],
    base_fisher: f64,
    budget: f64,
) -> Result<PerturbationPoint> {
    let acts = probe.activations(perturbed)?;
    let layers = compare_activations(base_acts, &acts)?;
    let l = layers.len() as f64;
    let one_minus_similarity = layers
        .iter()
        .map(|d| 1.0 - d.pca_similarity_abs.unwrap_or(0.0))
        .sum::<f64>()
        / l;
    let one_minus_cka = layers.iter().map(|d| 1.0 - d.cka.unwrap_or(0.0)).sum::<f64>() / l;
    let mut delta_gram = 0.0;
    for (x, y) in base_acts.iter().zip(&acts) {
        delta_gram += frobenius_norm(&centered_gram(y)?.sub(&centered_gram(x)?)?);
    }
    let fisher = fisher_diagonal(perturbed, &probe.batch, FisherLabels::Empirical)?.mean;
    let mut diff = perturbed.params().clone();
    diff.add_scaled(model.params(), -1.0);
    Ok(PerturbationPoint {
        budget,
        e_norm: diff.global_norm(),
        one_minus_similarity,
        mean_pca_distance: layers_mean_pca_distance(&layers)?,
        one_minus_cka,
        delta_gram: delta_gram / l,
        delta_fisher_mean: fisher - base_fisher,
    })
}

/// Sweeps perturbation budgets, recomputing every diagnostic against the
/// unperturbed model. The same noise direction is reused across budgets.
pub fn perturbation_probe(
    model: &TinyLM,
    probe: &ProbeSet,
    schedule: &[f64],
    target: PerturbTarget,
    seed: u64,
) -> Result<PerturbationReport> {
    let base_acts = probe.activations(model)?;
    let base_fisher = fisher_diagonal(model, &probe.batch, FisherLabels::Empirical)?.mean;
    let baseline = probe_point(model, model, probe, &base_acts, base_fisher, 0.0)?;
    let points = schedule
        .iter()
        .map(|&budget| {
            let perturbed = perturb_model(model, target, budget, seed)?;
            probe_point(model, &perturbed, probe, &base_acts, base_fisher, budget)
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationReport {
        target,
        baseline,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic_corpora, CorpusSpec};
    use crate::model::test_support::*;
    use crate::model::ModelConfig;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn one_dimensional_activations() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let p = layer_pca(&Matrix::from_rows(&rows).unwrap(), 0).unwrap();
        assert!((p.c1[0] - 1.0).abs() < 1e-12);
        assert!(p.lambda2.abs() < 1e-12);
        assert!((p.mean_projection[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn collapsed_layer_is_an_error() {
        let m = Matrix::new(4, 3, vec![0.5; 12]).unwrap();
        assert!(matches!(layer_pca(&m, 2), Err(Error::CollapsedLayer(2))));
    }

    #[test]
    fn translation_along_c1_shifts_first_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 30, 4);
        let po = layer_pca(&x, 0).unwrap();
        let t = 2.5;
        let mut y = x.clone();
        for r in 0..y.rows() {
            for (v, c) in y.row_mut(r).iter_mut().zip(&po.c1) {
                *v += t * c;
            }
        }
        let orig = PcaState { layers: vec![po] };
        let upd = pca_state_from_activations(&[y]).unwrap();
        let s = pca_shift(&orig, &upd).unwrap()[0];
        assert!((s[0] - t).abs() < 1e-12 && s[1].abs() < 1e-12);
        assert!(pca_similarity(&orig, &upd).unwrap()[0].abs > 1.0 - 1e-9);
    }

    #[test]
    fn rotated_copy_similarity_is_cosine_of_rotated_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 40, 2);
        let theta = 0.3f64;
        let r = Matrix::from_rows(&[
            vec![theta.cos(), theta.sin()],
            vec![-theta.sin(), theta.cos()],
        ])
        .unwrap();
        let y = x.matmul(&r).unwrap();
        let sx = pca_state_from_activations(&[x]).unwrap();
        let sy = pca_state_from_activations(&[y]).unwrap();
        // c1(Y) = Rᵀ c1(X) up to sign
        let rotated = r.transpose().matvec(&sx.layers[0].c1);
        let expect = cosine(&sx.layers[0].c1, &rotated).unwrap().abs();
        let got = pca_similarity(&sx, &sy).unwrap()[0].abs;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((expect - theta.cos()).abs() < 1e-12);
    }

    #[test]
    fn mean_distance_examples() {
        assert_eq!(mean_pca_distance(&[[0.0, 0.0]; 3]).unwrap(), 0.0);
        assert_eq!(mean_pca_distance(&[[3.0, 4.0], [0.0, 0.0]]).unwrap(), 2.5);
        assert!(mean_pca_distance(&[]).is_err());
    }

    #[test]
    fn cka_identity_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 10, 4);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        let flat = Matrix::new(10, 2, vec![1.0; 20]).unwrap();
        assert!(matches!(
            linear_cka(&x, &flat),
            Err(Error::DegenerateActivations)
        ));
        assert!(linear_cka(&x, &random_matrix(&mut rng, 9, 4)).is_err());
    }

    #[test]
    fn auc_ties_and_swap() {
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[3.0], &[1.0, 2.0]).unwrap(), 1.0);
        let a = auc(&[0.1, 0.5, 0.5], &[0.2, 0.5]).unwrap();
        let b = auc(&[0.2, 0.5], &[0.1, 0.5, 0.5]).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_k_score_takes_lowest_fraction() {
        let lp = [-1.0, -5.0, -2.0, -0.5, -3.0];
        // ceil(0.2·5) = 1
        assert_eq!(min_k_score(&lp, 0.2), -5.0);
        // ceil(0.5·5) = 3
        assert_eq!(min_k_score(&lp, 0.5), -10.0 / 3.0);
        assert_eq!(min_k_score(&lp, 1.0), -11.5 / 5.0);
    }

    #[test]
    fn identical_member_and_nonmember_scores_give_half() {
        let c = make_synthetic_corpora(0, &CorpusSpec::default()).unwrap();
        let m = TinyLM::new(ModelConfig::default(), 0).unwrap();
        let r = min_k_mia(&m, &c.forget, &c.forget, 0.2).unwrap();
        assert_eq!(r.auc, 0.5);
        assert!(min_k_mia(&m, &c.forget, &c.forget, 0.0).is_err());
    }

    #[test]
    fn fisher_histograms_cover_all_parameters() {
        let m = TinyLM::new(tiny_config(), 1).unwrap();
        let b = tiny_batch(2, 3, 6, 8);
        let f = fisher_diagonal(&m, &b, FisherLabels::Empirical).unwrap();
        assert!(f.diagonal.iter().all(|v| v >= 0.0));
        let total: u64 = f.layers.iter().flat_map(|l| l.histogram.iter()).sum();
        assert_eq!(total as usize, m.params().len());
        for l in &f.layers {
            assert_eq!(l.histogram.iter().sum::<u64>() as usize, l.param_count);
        }
        assert_eq!(fisher_bin(0.0), 0);
        assert_eq!(fisher_bin(1e3), FISHER_BINS - 1);
        assert_eq!(fisher_bin_edges().len(), FISHER_BINS + 1);
    }

    #[test]
    fn saturated_correct_logits_have_zero_fisher() {
        let cfg = ModelConfig {
            vocab_size: 4,
            context_len: 1,
            embed_dim: 2,
            hidden: vec![2],
        };
        let mut params = ParamSet::zeros(&cfg.tensor_shapes());
        params.tensor_mut(4).data_mut().copy_from_slice(&[800.0, 0.0, 0.0, 0.0]);
        let m = TinyLM::from_params(cfg, 0, params).unwrap();
        let b = Batch::from_windows(1, &[(vec![1], 0), (vec![2], 0)]).unwrap();
        let f = fisher_diagonal(&m, &b, FisherLabels::Empirical).unwrap();
        assert!(f.diagonal.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn sampled_fisher_converges_to_expected_fisher() {
        // one window repeated many times; exact expectation by enumerating labels
        let m = TinyLM::new(tiny_config(), 5).unwrap();
        let ctx = vec![1u32, 2];
        let reps = 4000;
        let windows: Vec<(Vec<u32>, u32)> = (0..reps).map(|_| (ctx.clone(), 0)).collect();
        let b = Batch::from_windows(2, &windows).unwrap();
        let sampled = fisher_diagonal(&m, &b, FisherLabels::Sampled { seed: 3 }).unwrap();

        let one = Batch::from_windows(2, &[(ctx.clone(), 0)]).unwrap();
        let lp = m.forward(&one, false).unwrap().log_probs;
        let mut expected = vec![0.0; m.params().len()];
        for y in 0..8u32 {
            let g = m.loss_and_grads(&one.with_targets(vec![y]).unwrap()).unwrap().grads;
            let p = lp.get(0, y as usize).exp();
            for (e, v) in expected.iter_mut().zip(g.iter()) {
                *e += p * v * v;
            }
        }
        let exp_mean: f64 = expected.iter().sum::<f64>() / expected.len() as f64;
        assert!(
            (sampled.mean - exp_mean).abs() < 0.1 * exp_mean,
            "{} vs {}",
            sampled.mean,
            exp_mean
        );
    }

    #[test]
    fn fisher_is_independent_of_thread_count() {
        let m = TinyLM::new(tiny_config(), 1).unwrap();
        let b = tiny_batch(3, 10, 8, 8);
        let a = fisher_diagonal(&m, &b, FisherLabels::Empirical).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool
            .install(|| fisher_diagonal(&m, &b, FisherLabels::Empirical))
            .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_budget_probe_matches_baseline() {
        let c = make_synthetic_corpora(0, &CorpusSpec::default()).unwrap();
        let m = TinyLM::new(ModelConfig::default(), 0).unwrap();
        let probe = ProbeSet::from_corpus(&c.retain, 64, 8).unwrap();
        let r = perturbation_probe(&m, &probe, &[0.0], PerturbTarget::AllLayers, 1).unwrap();
        let mut base = r.baseline.clone();
        base.budget = 0.0;
        assert_eq!(r.points[0], base);
        assert_eq!(r.baseline.mean_pca_distance, 0.0);
    }

    #[test]
    fn perturbation_budget_is_respected() {
        let m = TinyLM::new(ModelConfig::default(), 0).unwrap();
        for target in [PerturbTarget::Layer(1), PerturbTarget::AllLayers] {
            let p = perturb_model(&m, target, 2.0, 9).unwrap();
            let mut d = p.params().clone();
            d.add_scaled(m.params(), -1.0);
            assert!((d.global_norm() - 2.0).abs() < 1e-9);
        }
        assert!(perturb_model(&m, PerturbTarget::Layer(7), 1.0, 0).is_err());
    }

    #[test]
    fn probe_windows_are_evenly_spaced() {
        let c = make_synthetic_corpora(0, &CorpusSpec::default()).unwrap();
        let p = ProbeSet::from_corpus(&c.forget, 10, 8).unwrap();
        assert_eq!(p.len(), 10);
        let all = ProbeSet::from_corpus(&c.forget, 100_000, 8).unwrap();
        assert_eq!(all.len(), c.forget.len() * 8);
    }
}
