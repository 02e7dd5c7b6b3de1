//! Seeded pattern grammar: a Markov chain over content tokens with a
//! preferred successor for every token, plus a small set of motifs
//! stamped into sequences at random positions.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ProxyError;
use crate::rng::{stream, Rng};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
/// First id that carries content; everything below is a special token.
pub const FIRST_CONTENT: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_sequences: usize,
    pub num_motifs: usize,
    pub motif_len: usize,
    /// Probability of following the preferred successor.
    pub successor_prob: f64,
    /// Expected number of motif insertions per sequence.
    pub motif_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            num_sequences: 2000,
            num_motifs: 6,
            motif_len: 4,
            successor_prob: 0.6,
            motif_rate: 0.6,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), ProxyError> {
        let mut problems = Vec::new();
        if self.vocab_size < 8 {
            problems.push(format!("vocab_size {} < 8", self.vocab_size));
        }
        if self.seq_len < 8 {
            problems.push(format!("seq_len {} < 8", self.seq_len));
        }
        if self.num_sequences == 0 {
            problems.push("num_sequences must be positive".to_string());
        }
        if self.num_motifs == 0 || self.motif_len < 2 {
            problems.push("need at least one motif of length >= 2".to_string());
        }
        if self.motif_len + 1 > self.seq_len {
            problems.push(format!("motif_len {} does not fit after CLS in seq_len {}", self.motif_len, self.seq_len));
        }
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT as usize);
        if content < self.motif_len.max(4) {
            problems.push(format!("only {content} content tokens, fewer than the motif alphabet needs"));
        }
        if let Some(distinct) = content.checked_pow(self.motif_len as u32) {
            if distinct < self.num_motifs {
                problems.push("more motifs than distinct token strings".to_string());
            }
        }
        if !(0.0..=1.0).contains(&self.successor_prob) {
            problems.push("successor_prob must lie in [0, 1]".to_string());
        }
        if !(self.motif_rate >= 0.0 && self.motif_rate.is_finite()) {
            problems.push("motif_rate must be a non-negative number".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ProxyError::Spec(problems.join("; ")))
        }
    }
}

/// The sampled grammar. Everything derives from the corpus seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub vocab_size: usize,
    pub seq_len: usize,
    successor: Vec<u32>,
    successor_prob: f64,
    motif_rate: f64,
    pub motifs: Vec<Vec<u32>>,
}

impl Grammar {
    pub fn new(spec: &CorpusSpec) -> Result<Self, ProxyError> {
        spec.validate()?;
        let mut rng = stream(spec.seed, &[0]);
        let content: Vec<u32> = (FIRST_CONTENT..spec.vocab_size as u32).collect();
        let mut successor = content.clone();
        successor.shuffle(&mut rng);
        let mut motifs: Vec<Vec<u32>> = Vec::with_capacity(spec.num_motifs);
        while motifs.len() < spec.num_motifs {
            let m: Vec<u32> = (0..spec.motif_len).map(|_| rng.random_range(FIRST_CONTENT..spec.vocab_size as u32)).collect();
            if !motifs.contains(&m) {
                motifs.push(m);
            }
        }
        Ok(Self {
            vocab_size: spec.vocab_size,
            seq_len: spec.seq_len,
            successor,
            successor_prob: spec.successor_prob,
            motif_rate: spec.motif_rate,
            motifs,
        })
    }

    pub fn motif_len(&self) -> usize {
        self.motifs[0].len()
    }

    pub fn random_content(&self, rng: &mut Rng) -> u32 {
        rng.random_range(FIRST_CONTENT..self.vocab_size as u32)
    }

    /// `n` content tokens from the Markov chain.
    pub fn chain(&self, n: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        let mut prev = self.random_content(rng);
        for _ in 0..n {
            out.push(prev);
            prev = if rng.random_bool(self.successor_prob) {
                self.successor[(prev - FIRST_CONTENT) as usize]
            } else {
                self.random_content(rng)
            };
        }
        out
    }

    /// One corpus sequence: CLS followed by chain tokens with motifs stamped
    /// in.
    pub fn sample(&self, rng: &mut Rng) -> Vec<u32> {
        let mut seq = vec![CLS];
        seq.extend(self.chain(self.seq_len - 1, rng));
        let mut remaining = self.motif_rate;
        while remaining > 0.0 {
            if rng.random_bool(remaining.min(1.0)) {
                let motif = &self.motifs[rng.random_range(0..self.motifs.len())];
                let start = rng.random_range(1..=self.seq_len - motif.len());
                seq[start..start + motif.len()].copy_from_slice(motif);
            }
            remaining -= 1.0;
        }
        seq
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub grammar: Grammar,
    pub sequences: Vec<Vec<u32>>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus, ProxyError> {
    let grammar = Grammar::new(spec)?;
    let mut rng = stream(spec.seed, &[1]);
    let sequences = (0..spec.num_sequences).map(|_| grammar.sample(&mut rng)).collect();
    Ok(SyntheticCorpus { spec: spec.clone(), grammar, sequences })
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.spec.vocab_size];
        for s in &self.sequences {
            for &t in s {
                h[t as usize] += 1;
            }
        }
        h
    }

    /// Deterministic subset of `round(rho · n)` sequences (at least one),
    /// kept in corpus order.
    pub fn subsample(&self, rho: f64, seed: u64) -> Result<Vec<Vec<u32>>, ProxyError> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(ProxyError::Spec(format!("corpus fraction {rho} is outside (0, 1]")));
        }
        let n = self.sequences.len();
        let k = ((rho * n as f64).round() as usize).clamp(1, n);
        let mut rng = stream(seed, &[self.spec.seed, rho.to_bits()]);
        let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| self.sequences[i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerable_from_spec() {
        let spec = CorpusSpec { num_sequences: 50, ..CorpusSpec::default() };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.sequences, b.sequences);
        let c = generate_corpus(&CorpusSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn sequences_are_well_formed() {
        let corpus = generate_corpus(&CorpusSpec { num_sequences: 200, ..CorpusSpec::default() }).unwrap();
        for s in &corpus.sequences {
            assert_eq!(s.len(), 16);
            assert_eq!(s[0], CLS);
            assert!(s[1..].iter().all(|&t| t >= FIRST_CONTENT && t < 64));
        }
    }

    #[test]
    fn histogram_covers_every_content_id() {
        let spec = CorpusSpec { num_sequences: 10_000, seq_len: 32, ..CorpusSpec::default() };
        let h = generate_corpus(&spec).unwrap().histogram();
        assert_eq!(h[CLS as usize], 10_000);
        for t in FIRST_CONTENT as usize..64 {
            assert!(h[t] > 0, "token {t} never generated");
        }
    }

    #[test]
    fn successor_structure_is_visible() {
        let corpus = generate_corpus(&CorpusSpec { num_sequences: 500, motif_rate: 0.0, ..CorpusSpec::default() }).unwrap();
        let g = &corpus.grammar;
        let (mut hits, mut total) = (0, 0);
        for s in &corpus.sequences {
            for w in s[1..].windows(2) {
                total += 1;
                hits += (g.successor[(w[0] - FIRST_CONTENT) as usize] == w[1]) as usize;
            }
        }
        let rate = hits as f64 / total as f64;
        assert!((rate - 0.6 - 0.4 / 60.0).abs() < 0.03, "{rate}");
    }

    #[test]
    fn subsample_is_exact_and_deterministic() {
        let corpus = generate_corpus(&CorpusSpec { num_sequences: 10_000, ..CorpusSpec::default() }).unwrap();
        let a = corpus.subsample(0.1, 3).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, corpus.subsample(0.1, 3).unwrap());
        assert_ne!(a, corpus.subsample(0.1, 4).unwrap());
        assert_eq!(corpus.subsample(1.0, 3).unwrap(), corpus.sequences);
        assert!(corpus.subsample(0.0, 3).is_err());
        assert!(corpus.subsample(1.5, 3).is_err());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(generate_corpus(&CorpusSpec { vocab_size: 6, ..CorpusSpec::default() }).is_err());
        assert!(generate_corpus(&CorpusSpec { seq_len: 4, ..CorpusSpec::default() }).is_err());
        let err = CorpusSpec { vocab_size: 7, seq_len: 3, ..CorpusSpec::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("vocab_size") && err.to_string().contains("seq_len"));
    }
}
