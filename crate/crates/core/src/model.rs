//! Fixed-context feedforward next-token model with manual backpropagation.
//!
//! A window of `context_len` tokens is embedded, the embeddings are
//! concatenated, passed through a stack of GELU layers and projected to
//! vocabulary logits. Every hidden layer's post-activation output can be
//! captured for the representation diagnostics.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_len: 8,
            embed_dim: 32,
            hidden: vec![64, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "must be at least 2"));
        }
        if self.context_len == 0 || self.embed_dim == 0 {
            return Err(Error::config(
                "model.context_len",
                "context_len and embed_dim must be positive",
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(
                "model.hidden",
                "need at least one hidden layer, all widths positive",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.context_len * self.embed_dim
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden.len()
    }

    /// `(rows, cols)` of every parameter tensor in declaration order.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.vocab_size, self.embed_dim)];
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            shapes.push((1, h));
            fan_in = h;
        }
        shapes.push((self.vocab_size, fan_in));
        shapes.push((1, self.vocab_size));
        shapes
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for l in 0..self.hidden.len() {
            names.push(format!("hidden.{l}.weight"));
            names.push(format!("hidden.{l}.bias"));
        }
        names.push("output.weight".into());
        names.push("output.bias".into());
        names
    }

    /// Parameter groups ("layers") as `(name, tensor indices)`.
    pub fn layer_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups = vec![("embedding".to_string(), vec![0])];
        for l in 0..self.hidden.len() {
            groups.push((format!("hidden.{l}"), vec![1 + 2 * l, 2 + 2 * l]));
        }
        let o = 1 + 2 * self.hidden.len();
        groups.push(("output".into(), vec![o, o + 1]));
        groups
    }

    pub fn hidden_weight_index(&self, layer: usize) -> usize {
        1 + 2 * layer
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// A parameter-shaped collection of tensors (parameters, gradients, moments).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Matrix>) -> Self {
        Self { tensors }
    }

    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            tensors: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.tensors[i]
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors.iter_mut().flat_map(|t| t.data_mut().iter_mut())
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// Flat-index read across tensors.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.data().len() {
                return t.data()[idx];
            }
            idx -= t.data().len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for t in &mut self.tensors {
            let n = t.data().len();
            if idx < n {
                t.data_mut()[idx] = v;
                return;
            }
            idx -= n;
        }
        panic!("flat index out of range");
    }
}

/// Token windows with next-token targets, tagged with their source sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    context_len: usize,
    contexts: Vec<u32>,
    targets: Vec<u32>,
    sequence: Vec<usize>,
    n_sequences: usize,
}

impl Batch {
    /// Every full-context window of every sequence.
    pub fn from_sequences<S: AsRef<[u32]>>(sequences: &[S], context_len: usize) -> Result<Batch> {
        let mut b = Batch {
            context_len,
            contexts: Vec::new(),
            targets: Vec::new(),
            sequence: Vec::new(),
            n_sequences: sequences.len(),
        };
        for (si, s) in sequences.iter().enumerate() {
            let s = s.as_ref();
            if s.len() < context_len + 1 {
                return Err(Error::Invalid(format!(
                    "sequence {si} shorter than context_len + 1"
                )));
            }
            for end in context_len..s.len() {
                b.contexts.extend_from_slice(&s[end - context_len..end]);
                b.targets.push(s[end]);
                b.sequence.push(si);
            }
        }
        Ok(b)
    }

    /// Explicit windows; each window is its own sequence.
    pub fn from_windows(context_len: usize, windows: &[(Vec<u32>, u32)]) -> Result<Batch> {
        let mut b = Batch {
            context_len,
            contexts: Vec::with_capacity(windows.len() * context_len),
            targets: Vec::with_capacity(windows.len()),
            sequence: Vec::with_capacity(windows.len()),
            n_sequences: windows.len(),
        };
        for (i, (ctx, y)) in windows.iter().enumerate() {
            if ctx.len() != context_len {
                return Err(Error::Invalid(format!(
                    "window {i} has length {} != context_len {context_len}",
                    ctx.len()
                )));
            }
            b.contexts.extend_from_slice(ctx);
            b.targets.push(*y);
            b.sequence.push(i);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn context(&self, i: usize) -> &[u32] {
        &self.contexts[i * self.context_len..(i + 1) * self.context_len]
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    pub fn sequence_of(&self) -> &[usize] {
        &self.sequence
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    /// Same windows with replaced targets.
    pub fn with_targets(&self, targets: Vec<u32>) -> Result<Batch> {
        if targets.len() != self.targets.len() {
            return Err(Error::Shape("target count".into()));
        }
        Ok(Batch {
            targets,
            ..self.clone()
        })
    }

    /// Windows `indices` only, each becoming its own sequence.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut b = Batch {
            context_len: self.context_len,
            contexts: Vec::with_capacity(indices.len() * self.context_len),
            targets: Vec::with_capacity(indices.len()),
            sequence: Vec::with_capacity(indices.len()),
            n_sequences: indices.len(),
        };
        for (k, &i) in indices.iter().enumerate() {
            b.contexts.extend_from_slice(self.context(i));
            b.targets.push(self.targets[i]);
            b.sequence.push(k);
        }
        b
    }

    /// Concatenation with sequence ids of `other` offset past ours.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.context_len != other.context_len {
            return Err(Error::Shape("context length".into()));
        }
        let mut b = self.clone();
        b.contexts.extend_from_slice(&other.contexts);
        b.targets.extend_from_slice(&other.targets);
        b.sequence
            .extend(other.sequence.iter().map(|s| s + self.n_sequences));
        b.n_sequences += other.n_sequences;
        Ok(b)
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// One `(positions × width)` matrix per hidden layer when captured.
    pub activations: Option<Vec<Matrix>>,
    pub logits: Matrix,
    pub log_probs: Matrix,
}

/// Intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    pub logits: Matrix,
    pub log_probs: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamSet,
}

/// Accuracy, perplexity and per-token log-probabilities over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_nll: f64,
    /// `+∞` when the mean NLL exceeds the overflow threshold.
    pub perplexity: f64,
    pub sequence_log_probs: Vec<Vec<f64>>,
}

/// Mean NLL above which perplexity is reported as `+∞`.
pub const PERPLEXITY_OVERFLOW_NLL: f64 = 700.0;

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    config: ModelConfig,
    seed: u64,
    params: ParamSet,
}

impl TinyLM {
    /// Randomly initialized model: uniform weights with variance `1/fan_in`,
    /// unit-variance embeddings, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let shapes = config.tensor_shapes();
        let n_hidden = config.n_hidden();
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let is_bias = i > 0 && i % 2 == 0;
                let bound = if i == 0 {
                    3f64.sqrt()
                } else if is_bias {
                    0.0
                } else {
                    (3.0 / c as f64).sqrt()
                };
                let data = (0..r * c)
                    .map(|_| {
                        if bound == 0.0 {
                            0.0
                        } else {
                            rng.gen_range(-bound..bound)
                        }
                    })
                    .collect();
                Matrix::new(r, c, data).expect("shape")
            })
            .collect();
        debug_assert_eq!(shapes.len(), 2 * n_hidden + 3);
        Ok(Self {
            config,
            seed,
            params: ParamSet::new(tensors),
        })
    }

    pub fn from_params(config: ModelConfig, seed: u64, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if params.tensors().len() != shapes.len()
            || params
                .tensors()
                .iter()
                .zip(&shapes)
                .any(|(t, s)| t.shape() != *s)
        {
            return Err(Error::Shape("parameter shapes do not match config".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replaces the parameters, rejecting shape changes and non-finite values.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if !params.same_shape(&self.params) {
            return Err(Error::Shape("parameter shapes changed".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut_unchecked(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_hidden(&self) -> usize {
        self.config.n_hidden()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.context_len() != self.config.context_len {
            return Err(Error::Shape(format!(
                "window length {} != context_len {}",
                batch.context_len(),
                self.config.context_len
            )));
        }
        let v = self.config.vocab_size;
        if let Some(&t) = batch
            .contexts
            .iter()
            .chain(batch.targets.iter())
            .find(|&&t| t as usize >= v)
        {
            return Err(Error::OutOfVocab { token: t, vocab: v });
        }
        Ok(())
    }

    pub fn forward_cache(&self, batch: &Batch) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let n = batch.len();
        let e = self.config.embed_dim;
        let emb = self.params.tensor(0);
        let mut inputs = Matrix::zeros(n, self.config.input_dim());
        for i in 0..n {
            let row = inputs.row_mut(i);
            for (p, &tok) in batch.context(i).iter().enumerate() {
                row[p * e..(p + 1) * e].copy_from_slice(emb.row(tok as usize));
            }
        }

        let mut pre = Vec::with_capacity(self.n_hidden());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.n_hidden());
        for l in 0..self.n_hidden() {
            let w = self.params.tensor(1 + 2 * l);
            let b = self.params.tensor(2 + 2 * l);
            let input = post.last().unwrap_or(&inputs);
            let mut z = input.matmul_nt(w)?;
            for r in 0..n {
                for (v, bias) in z.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bias;
                }
            }
            let mut h = z.clone();
            h.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            pre.push(z);
            post.push(h);
        }
        let o = 1 + 2 * self.n_hidden();
        let mut logits = post.last().expect("hidden layer").matmul_nt(self.params.tensor(o))?;
        let bo = self.params.tensor(o + 1);
        for r in 0..n {
            for (v, bias) in logits.row_mut(r).iter_mut().zip(bo.data()) {
                *v += bias;
            }
        }
        let log_probs = log_softmax(&logits);
        Ok(ForwardCache {
            inputs,
            pre,
            post,
            logits,
            log_probs,
        })
    }

    pub fn forward(&self, batch: &Batch, capture: bool) -> Result<ForwardTrace> {
        let cache = self.forward_cache(batch)?;
        Ok(ForwardTrace {
            activations: capture.then_some(cache.post),
            logits: cache.logits,
            log_probs: cache.log_probs,
        })
    }

    /// Index of the first layer with a non-finite output, if any.
    fn first_non_finite(&self, cache: &ForwardCache) -> Option<usize> {
        cache
            .post
            .iter()
            .position(|m| !m.is_finite())
            .or_else(|| (!cache.logits.is_finite()).then_some(self.n_hidden()))
    }

    /// Backpropagates `d loss / d logits` to parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, batch: &Batch, dlogits: &Matrix) -> ParamSet {
        let n = batch.len();
        let mut grads = self.params.zeros_like();
        let o = 1 + 2 * self.n_hidden();
        let last = cache.post.last().expect("hidden layer");
        *grads.tensor_mut(o) = dlogits.matmul_tn(last).expect("shape");
        *grads.tensor_mut(o + 1) = column_sums(dlogits);
        let mut dh = dlogits.matmul(self.params.tensor(o)).expect("shape");

        for l in (0..self.n_hidden()).rev() {
            let z = &cache.pre[l];
            let mut dz = dh;
            for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                *d *= gelu_grad(zv);
            }
            let input = if l == 0 {
                &cache.inputs
            } else {
                &cache.post[l - 1]
            };
            *grads.tensor_mut(1 + 2 * l) = dz.matmul_tn(input).expect("shape");
            *grads.tensor_mut(2 + 2 * l) = column_sums(&dz);
            dh = dz.matmul(self.params.tensor(1 + 2 * l)).expect("shape");
        }

        let e = self.config.embed_dim;
        let demb = grads.tensor_mut(0);
        for i in 0..n {
            let drow = dh.row(i);
            for (p, &tok) in batch.context(i).iter().enumerate() {
                let erow = demb.row_mut(tok as usize);
                for (g, d) in erow.iter_mut().zip(&drow[p * e..(p + 1) * e]) {
                    *g += d;
                }
            }
        }
        grads
    }

    /// Generic objective: `f` maps log-probabilities to a loss and its
    /// gradient with respect to the logits.
    pub fn objective_with<F>(&self, batch: &Batch, f: F) -> Result<LossGrad>
    where
        F: FnOnce(&Matrix) -> (f64, Matrix),
    {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let cache = self.forward_cache(batch)?;
        if let Some(layer) = self.first_non_finite(&cache) {
            return Err(Error::NonFiniteLoss { layer });
        }
        let (loss, dlogits) = f(&cache.log_probs);
        if !loss.is_finite() || !dlogits.is_finite() {
            return Err(Error::NonFiniteLoss {
                layer: self.n_hidden(),
            });
        }
        let grads = self.backward(&cache, batch, &dlogits);
        Ok(LossGrad { loss, grads })
    }

    /// Mean next-token cross-entropy and its parameter gradients.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<LossGrad> {
        let targets = batch.targets().to_vec();
        self.objective_with(batch, |lp| cross_entropy_logit_grad(lp, &targets))
    }

    pub fn evaluate(&self, corpus: &Corpus) -> Result<Evaluation> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput);
        }
        let batch = Batch::from_sequences(&corpus.sequences, self.config.context_len)?;
        let cache = self.forward_cache(&batch)?;
        let mut hits = 0usize;
        let mut nll = 0.0;
        let mut per_seq = vec![Vec::new(); corpus.len()];
        for i in 0..batch.len() {
            let row = cache.logits.row(i);
            let y = batch.targets()[i] as usize;
            // ties resolve to the lowest index
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0;
            if argmax == y {
                hits += 1;
            }
            let lp = cache.log_probs.get(i, y);
            nll -= lp;
            per_seq[batch.sequence_of()[i]].push(lp);
        }
        let n = batch.len() as f64;
        let mean_nll = nll / n;
        let perplexity = if mean_nll > PERPLEXITY_OVERFLOW_NLL || !mean_nll.is_finite() {
            f64::INFINITY
        } else {
            mean_nll.exp()
        };
        Ok(Evaluation {
            accuracy: hits as f64 / n,
            mean_nll,
            perplexity,
            sequence_log_probs: per_seq,
        })
    }

    // ---- checkpoint format ----

    pub const CHECKPOINT_MAGIC: &'static [u8; 4] = b"TLMC";
    pub const CHECKPOINT_VERSION: u32 = 1;

    /// Serializes to the `TLMC` checkpoint layout (see `docs/formats.md`).
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(32 + 8 * self.params.len());
        out.extend_from_slice(Self::CHECKPOINT_MAGIC);
        out.extend_from_slice(&Self::CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.vocab_size, c.context_len, c.embed_dim, c.hidden.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &h in &c.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "header")?;
        if &magic != Self::CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "TLMC" });
        }
        let version = read_u32(&mut r, "header")?;
        if version != Self::CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let vocab_size = read_u32(&mut r, "config")? as usize;
        let context_len = read_u32(&mut r, "config")? as usize;
        let embed_dim = read_u32(&mut r, "config")? as usize;
        let n_hidden = read_u32(&mut r, "config")? as usize;
        if n_hidden > 1024 {
            return Err(Error::Invalid(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut r, "config").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            vocab_size,
            context_len,
            embed_dim,
            hidden,
        };
        config.validate()?;
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8, "config")?;
        let seed = u64::from_le_bytes(b8);
        read_exact(&mut r, &mut b8, "config")?;
        let count = u64::from_le_bytes(b8) as usize;
        if count != config.param_count() {
            return Err(Error::Shape(format!(
                "checkpoint holds {count} parameters, config implies {}",
                config.param_count()
            )));
        }
        let mut tensors = Vec::new();
        for (name, (rows, cols)) in config.tensor_names().into_iter().zip(config.tensor_shapes()) {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                read_exact(&mut r, &mut b8, &name)?;
                data.push(f64::from_le_bytes(b8));
            }
            tensors.push(Matrix::new(rows, cols, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Invalid("trailing bytes after checkpoint".into()));
        }
        Self::from_params(config, seed, ParamSet::new(tensors))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_checkpoint_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Truncated(what.to_string()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (a, v) in s.data_mut().iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    s
}

/// Softmax probabilities from log-probabilities.
pub fn probs_from_log(log_probs: &Matrix) -> Matrix {
    let mut p = log_probs.clone();
    p.data_mut().iter_mut().for_each(|v| *v = v.exp());
    p
}

/// Mean cross-entropy against `targets` and its logit gradient `(p − onehot)/n`.
pub fn cross_entropy_logit_grad(log_probs: &Matrix, targets: &[u32]) -> (f64, Matrix) {
    let n = log_probs.rows() as f64;
    let mut d = probs_from_log(log_probs);
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        loss -= log_probs.get(i, y as usize);
        let v = d.get(i, y as usize);
        d.set(i, y as usize, v - 1.0);
    }
    d.data_mut().iter_mut().for_each(|v| *v /= n);
    (loss / n, d)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            context_len: 2,
            embed_dim: 3,
            hidden: vec![5, 4],
        }
    }

    pub fn tiny_batch(seed: u64, n_seqs: usize, len: usize, vocab: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<u32>> = (0..n_seqs)
            .map(|_| (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect())
            .collect();
        Batch::from_sequences(&seqs, 2).unwrap()
    }

    /// Central finite-difference check of `grads` against `loss_at`.
    /// Returns the max relative error, floored at `1e-6` in the denominator.
    pub fn max_fd_error<F>(model: &TinyLM, grads: &ParamSet, loss_at: F) -> f64
    where
        F: Fn(&TinyLM) -> f64,
    {
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..model.params().len() {
            let mut plus = model.clone();
            let base = model.params().get_flat(i);
            plus.params_mut_unchecked().set_flat(i, base + h);
            let mut minus = model.clone();
            minus.params_mut_unchecked().set_flat(i, base - h);
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grads.get_flat(i);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        worst
    }
}
