//! Synthetic token corpora standing in for the forget, retain and unrelated
//! data domains.
//!
//! Every sequence is a noisy copy of a template: a fixed random token string
//! in which each position is independently resampled with probability
//! `noise_rate`. Forget and retain draw their templates from the same token
//! range, so they share surface statistics but never share a template.
//! Unrelated sequences live on a reserved tail of the vocabulary. Held-out
//! sequences from the forget and retain templates act as non-members for
//! membership inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Forget,
    Retain,
    Unrelated,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Forget, Domain::Retain, Domain::Unrelated];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Forget => "forget",
            Domain::Retain => "retain",
            Domain::Unrelated => "unrelated",
        }
    }

    /// Tag byte used by the activation dump format.
    pub fn tag(self) -> u8 {
        match self {
            Domain::Forget => 0,
            Domain::Retain => 1,
            Domain::Unrelated => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Domain> {
        match tag {
            0 => Some(Domain::Forget),
            1 => Some(Domain::Retain),
            2 => Some(Domain::Unrelated),
            _ => None,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forget" => Ok(Domain::Forget),
            "retain" => Ok(Domain::Retain),
            "unrelated" => Ok(Domain::Unrelated),
            other => Err(Error::Invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// A list of token sequences from one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub domain: Domain,
    pub sequences: Vec<Vec<u32>>,
    /// Template id each sequence was generated from.
    pub template_ids: Vec<usize>,
}

impl Corpus {
    pub fn new(
        vocab_size: usize,
        domain: Domain,
        sequences: Vec<Vec<u32>>,
        template_ids: Vec<usize>,
        context_len: usize,
    ) -> Result<Self> {
        if template_ids.len() != sequences.len() {
            return Err(Error::Invalid("one template id per sequence".into()));
        }
        for (i, s) in sequences.iter().enumerate() {
            if s.len() < context_len + 1 {
                return Err(Error::Invalid(format!(
                    "sequence {i} has length {} < context_len + 1",
                    s.len()
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::OutOfVocab {
                    token: t,
                    vocab: vocab_size,
                });
            }
        }
        Ok(Self {
            vocab_size,
            domain,
            sequences,
            template_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Sub-corpus made of the given sequence indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            vocab_size: self.vocab_size,
            domain: self.domain,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            template_ids: indices.iter().map(|&i| self.template_ids[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub context_len: usize,
    pub seq_len: usize,
    /// Size of the reserved vocabulary tail used only by unrelated data.
    pub unrelated_vocab: usize,
    pub forget_sequences: usize,
    pub retain_sequences: usize,
    pub unrelated_sequences: usize,
    /// Held-out sequences per forget/retain domain (MIA non-members).
    pub holdout_sequences: usize,
    pub forget_templates: usize,
    pub retain_templates: usize,
    pub unrelated_templates: usize,
    pub noise_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_len: 8,
            seq_len: 16,
            unrelated_vocab: 16,
            forget_sequences: 32,
            retain_sequences: 64,
            unrelated_sequences: 32,
            holdout_sequences: 32,
            forget_templates: 4,
            retain_templates: 8,
            unrelated_templates: 4,
            noise_rate: 0.25,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("corpus.vocab_size", "must be at least 8"));
        }
        if self.unrelated_vocab == 0 || self.unrelated_vocab + 2 > self.vocab_size {
            return Err(Error::config(
                "corpus.unrelated_vocab",
                "must leave at least two shared tokens",
            ));
        }
        if self.seq_len < self.context_len + 1 || self.context_len == 0 {
            return Err(Error::config(
                "corpus.seq_len",
                "must be at least context_len + 1 with context_len >= 1",
            ));
        }
        for (field, n) in [
            ("corpus.forget_sequences", self.forget_sequences),
            ("corpus.retain_sequences", self.retain_sequences),
            ("corpus.unrelated_sequences", self.unrelated_sequences),
            ("corpus.holdout_sequences", self.holdout_sequences),
            ("corpus.forget_templates", self.forget_templates),
            ("corpus.retain_templates", self.retain_templates),
            ("corpus.unrelated_templates", self.unrelated_templates),
        ] {
            if n == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("corpus.noise_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn shared_vocab(&self) -> u32 {
        (self.vocab_size - self.unrelated_vocab) as u32
    }
}

/// The corpora of one experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpora {
    pub forget: Corpus,
    pub retain: Corpus,
    pub unrelated: Corpus,
    pub forget_holdout: Corpus,
    pub retain_holdout: Corpus,
}

impl SyntheticCorpora {
    pub fn by_domain(&self, domain: Domain) -> &Corpus {
        match domain {
            Domain::Forget => &self.forget,
            Domain::Retain => &self.retain,
            Domain::Unrelated => &self.unrelated,
        }
    }

    /// Non-member counterpart for membership inference, if the domain has one.
    pub fn holdout(&self, domain: Domain) -> Option<&Corpus> {
        match domain {
            Domain::Forget => Some(&self.forget_holdout),
            Domain::Retain => Some(&self.retain_holdout),
            Domain::Unrelated => None,
        }
    }
}

struct Template {
    id: usize,
    tokens: Vec<u32>,
    lo: u32,
    hi: u32,
}

impl Template {
    fn sample(&self, rng: &mut ChaCha8Rng, noise: f64) -> Vec<u32> {
        self.tokens
            .iter()
            .map(|&t| {
                if rng.gen::<f64>() < noise {
                    rng.gen_range(self.lo..self.hi)
                } else {
                    t
                }
            })
            .collect()
    }
}

fn make_templates(
    rng: &mut ChaCha8Rng,
    first_id: usize,
    count: usize,
    len: usize,
    lo: u32,
    hi: u32,
) -> Vec<Template> {
    (0..count)
        .map(|i| Template {
            id: first_id + i,
            tokens: (0..len).map(|_| rng.gen_range(lo..hi)).collect(),
            lo,
            hi,
        })
        .collect()
}

fn draw(
    rng: &mut ChaCha8Rng,
    templates: &[Template],
    count: usize,
    noise: f64,
) -> (Vec<Vec<u32>>, Vec<usize>) {
    (0..count)
        .map(|i| {
            let t = &templates[i % templates.len()];
            (t.sample(rng, noise), t.id)
        })
        .unzip()
}

/// Generates forget, retain, unrelated and held-out corpora, deterministic in `seed`.
pub fn make_synthetic_corpora(seed: u64, spec: &CorpusSpec) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpora"));
    let shared = spec.shared_vocab();
    let vocab = spec.vocab_size as u32;
    let len = spec.seq_len;

    let forget_t = make_templates(&mut rng, 0, spec.forget_templates, len, 0, shared);
    let retain_t = make_templates(
        &mut rng,
        spec.forget_templates,
        spec.retain_templates,
        len,
        0,
        shared,
    );
    let unrelated_t = make_templates(
        &mut rng,
        spec.forget_templates + spec.retain_templates,
        spec.unrelated_templates,
        len,
        shared,
        vocab,
    );

    let noise = spec.noise_rate;
    let build = |rng: &mut ChaCha8Rng, t: &[Template], n: usize, d: Domain| {
        let (seqs, ids) = draw(rng, t, n, noise);
        Corpus::new(spec.vocab_size, d, seqs, ids, spec.context_len)
    };
    let forget = build(&mut rng, &forget_t, spec.forget_sequences, Domain::Forget)?;
    let retain = build(&mut rng, &retain_t, spec.retain_sequences, Domain::Retain)?;
    let unrelated = build(
        &mut rng,
        &unrelated_t,
        spec.unrelated_sequences,
        Domain::Unrelated,
    )?;
    let forget_holdout = build(&mut rng, &forget_t, spec.holdout_sequences, Domain::Forget)?;
    let retain_holdout = build(&mut rng, &retain_t, spec.holdout_sequences, Domain::Retain)?;

    Ok(SyntheticCorpora {
        forget,
        retain,
        unrelated,
        forget_holdout,
        retain_holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_in_seed() {
        let spec = CorpusSpec::default();
        let a = make_synthetic_corpora(1, &spec).unwrap();
        let b = make_synthetic_corpora(1, &spec).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_corpora(2, &spec).unwrap();
        assert_ne!(a.forget, c.forget);
    }

    #[test]
    fn forget_and_retain_templates_disjoint() {
        let c = make_synthetic_corpora(1, &CorpusSpec::default()).unwrap();
        let f: HashSet<_> = c.forget.template_ids.iter().collect();
        let r: HashSet<_> = c.retain.template_ids.iter().collect();
        assert!(f.is_disjoint(&r));
    }

    #[test]
    fn unrelated_uses_reserved_range() {
        let spec = CorpusSpec::default();
        let c = make_synthetic_corpora(7, &spec).unwrap();
        let lo = (spec.vocab_size - spec.unrelated_vocab) as u32;
        let mut hist = vec![0usize; spec.vocab_size];
        for s in &c.unrelated.sequences {
            for &t in s {
                hist[t as usize] += 1;
            }
        }
        assert!(hist[..lo as usize].iter().all(|&n| n == 0));
        assert!(hist[lo as usize..].iter().sum::<usize>() > 0);
        for s in c.forget.sequences.iter().chain(&c.retain.sequences) {
            assert!(s.iter().all(|&t| t < lo));
        }
    }

    #[test]
    fn rejects_inconsistent_spec() {
        let spec = CorpusSpec {
            seq_len: 4,
            context_len: 8,
            ..CorpusSpec::default()
        };
        assert!(matches!(
            make_synthetic_corpora(0, &spec),
            Err(Error::Config { .. })
        ));
        let spec = CorpusSpec {
            vocab_size: 4,
            ..CorpusSpec::default()
        };
        assert!(make_synthetic_corpora(0, &spec).is_err());
    }
}
