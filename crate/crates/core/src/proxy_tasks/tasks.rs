//! The three proxy tasks: motif detection, copy detection on sequence
//! pairs, and motif span extraction.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::corpus::{Grammar, SyntheticCorpus, CLS, FIRST_CONTENT, SEP};
use super::ProxyError;
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// `start..=end` are token positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanExample {
    pub tokens: Vec<u32>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSizes {
    pub train: usize,
    pub dev: usize,
    pub seed: u64,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self { train: 256, dev: 128, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTaskSuite {
    /// Label 1 iff the designated motif occurs.
    pub classification: Split<ClassExample>,
    /// `CLS s1 SEP s2`, label 1 iff `s2` is an exact copy of `s1`.
    pub pair: Split<ClassExample>,
    /// Exactly one motif occurrence, located by its span.
    pub span: Split<SpanExample>,
    pub designated_motif: Vec<u32>,
    pub motifs: Vec<Vec<u32>>,
}

pub const TASK_NAMES: [&str; 3] = ["classification", "pair", "span"];

// Labelers used to re-derive labels from tokens alone.

pub fn occurrences(tokens: &[u32], motif: &[u32]) -> Vec<usize> {
    if motif.is_empty() || tokens.len() < motif.len() {
        return Vec::new();
    }
    (0..=tokens.len() - motif.len()).filter(|&i| tokens[i..i + motif.len()] == *motif).collect()
}

pub fn label_classification(tokens: &[u32], motif: &[u32]) -> usize {
    usize::from(!occurrences(tokens, motif).is_empty())
}

/// `None` when the layout is not `CLS s1 SEP s2` with equal halves.
pub fn label_pair(tokens: &[u32]) -> Option<usize> {
    if tokens.len() < 4 || tokens.len() % 2 != 0 || tokens[0] != CLS {
        return None;
    }
    let k = (tokens.len() - 2) / 2;
    if tokens[k + 1] != SEP {
        return None;
    }
    Some(usize::from(tokens[1..=k] == tokens[k + 2..]))
}

/// The span of the only motif occurrence, or `None` if there is not exactly
/// one.
pub fn label_span(tokens: &[u32], motifs: &[Vec<u32>]) -> Option<(usize, usize)> {
    let mut found = motifs.iter().flat_map(|m| occurrences(tokens, m).into_iter().map(move |s| (s, s + m.len() - 1)));
    let first = found.next()?;
    found.next().is_none().then_some(first)
}

/// Breaks every occurrence of `motifs` except the one starting at
/// `protect` by redrawing a token that lies outside the protected window.
fn scrub(seq: &mut [u32], motifs: &[Vec<u32>], protect: Option<usize>, g: &Grammar, rng: &mut Rng) {
    let width = g.motif_len();
    loop {
        let hit = motifs.iter().find_map(|m| occurrences(seq, m).into_iter().find(|&s| Some(s) != protect));
        let Some(start) = hit else { return };
        let pos = (start..start + width)
            .find(|&i| protect.is_none_or(|p| i < p || i >= p + width))
            .expect("a different occurrence leaves the protected window");
        let old = seq[pos];
        while seq[pos] == old {
            seq[pos] = g.random_content(rng);
        }
    }
}

fn stamp(seq: &mut [u32], motif: &[u32], rng: &mut Rng) -> usize {
    let start = rng.random_range(1..=seq.len() - motif.len());
    seq[start..start + motif.len()].copy_from_slice(motif);
    start
}

fn classification_example(g: &Grammar, label: usize, rng: &mut Rng) -> ClassExample {
    let motif = &g.motifs[0];
    let mut tokens = g.sample(rng);
    if label == 1 {
        stamp(&mut tokens, motif, rng);
    } else {
        scrub(&mut tokens, std::slice::from_ref(motif), None, g, rng);
    }
    ClassExample { tokens, label }
}

fn pair_example(g: &Grammar, label: usize, rng: &mut Rng) -> ClassExample {
    let k = (g.seq_len - 2) / 2;
    let first = g.chain(k, rng);
    let mut second = first.clone();
    if label == 0 {
        let n = rng.random_range(1..=2usize.min(k));
        for pos in rand::seq::index::sample(rng, k, n) {
            let old = second[pos];
            while second[pos] == old {
                second[pos] = g.random_content(rng);
            }
        }
    }
    let mut tokens = vec![CLS];
    tokens.extend(first);
    tokens.push(SEP);
    tokens.extend(second);
    ClassExample { tokens, label }
}

fn span_example(g: &Grammar, rng: &mut Rng) -> SpanExample {
    let mut tokens = g.sample(rng);
    scrub(&mut tokens, &g.motifs, None, g, rng);
    let motif = &g.motifs[rng.random_range(0..g.motifs.len())];
    let start = stamp(&mut tokens, motif, rng);
    scrub(&mut tokens, &g.motifs, Some(start), g, rng);
    SpanExample { tokens, start, end: start + motif.len() - 1 }
}

/// Draws `train + dev` examples with distinct token sequences.
fn draw_split<T>(sizes: &TaskSizes, rng: &mut Rng, key: impl Fn(&T) -> &[u32], mut make: impl FnMut(usize, &mut Rng) -> T) -> Split<T> {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut all = Vec::with_capacity(sizes.train + sizes.dev);
    while all.len() < sizes.train + sizes.dev {
        let ex = make(all.len(), rng);
        if seen.insert(key(&ex).to_vec()) {
            all.push(ex);
        }
    }
    let dev = all.split_off(sizes.train);
    Split { train: all, dev }
}

pub fn build_tasks(corpus: &SyntheticCorpus, sizes: &TaskSizes) -> Result<ProxyTaskSuite, ProxyError> {
    if corpus.is_empty() {
        return Err(ProxyError::Spec("empty corpus".into()));
    }
    if sizes.train < 2 || sizes.dev < 2 {
        return Err(ProxyError::Spec("task splits need at least two examples each".into()));
    }
    let g = &corpus.grammar;
    if g.motifs.iter().flatten().any(|&t| t < FIRST_CONTENT || t as usize >= g.vocab_size) {
        return Err(ProxyError::Spec("motif uses tokens outside the content vocabulary".into()));
    }
    let root = crate::rng::derive_seed(corpus.spec.seed, &[sizes.seed]);
    let classification = draw_split(sizes, &mut stream(root, &[0]), |e: &ClassExample| &e.tokens, |i, rng| {
        classification_example(g, i % 2, rng)
    });
    let pair = draw_split(sizes, &mut stream(root, &[1]), |e: &ClassExample| &e.tokens, |i, rng| pair_example(g, i % 2, rng));
    let span = draw_split(sizes, &mut stream(root, &[2]), |e: &SpanExample| &e.tokens, |_, rng| span_example(g, rng));
    Ok(ProxyTaskSuite { classification, pair, span, designated_motif: g.motifs[0].clone(), motifs: g.motifs.clone() })
}

/// Token-overlap F1 between two inclusive position spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if pred.1 < pred.0 || hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy_tasks::corpus::{generate_corpus, CorpusSpec};

    fn suite() -> ProxyTaskSuite {
        let corpus = generate_corpus(&CorpusSpec { num_sequences: 20, ..CorpusSpec::default() }).unwrap();
        build_tasks(&corpus, &TaskSizes::default()).unwrap()
    }

    #[test]
    fn oracle_relabeling_agrees_everywhere() {
        let s = suite();
        for ex in s.classification.train.iter().chain(&s.classification.dev) {
            assert_eq!(label_classification(&ex.tokens, &s.designated_motif), ex.label);
        }
        for ex in s.pair.train.iter().chain(&s.pair.dev) {
            assert_eq!(label_pair(&ex.tokens), Some(ex.label));
        }
        for ex in s.span.train.iter().chain(&s.span.dev) {
            assert_eq!(label_span(&ex.tokens, &s.motifs), Some((ex.start, ex.end)));
        }
    }

    #[test]
    fn labels_are_balanced_and_splits_disjoint() {
        let s = suite();
        for split in [&s.classification, &s.pair] {
            for part in [&split.train, &split.dev] {
                let ones = part.iter().filter(|e| e.label == 1).count() as f64 / part.len() as f64;
                assert!((0.45..=0.55).contains(&ones), "{ones}");
            }
            let train: HashSet<_> = split.train.iter().map(|e| &e.tokens).collect();
            assert!(split.dev.iter().all(|e| !train.contains(&e.tokens)));
        }
        let train: HashSet<_> = s.span.train.iter().map(|e| &e.tokens).collect();
        assert!(s.span.dev.iter().all(|e| !train.contains(&e.tokens)));
        assert_eq!(s.span.train.len(), 256);
        assert_eq!(s.span.dev.len(), 128);
    }

    #[test]
    fn builds_deterministically() {
        assert_eq!(suite(), suite());
    }

    #[test]
    fn labeler_examples() {
        let motifs = vec![vec![10, 11, 12, 13]];
        let tokens = [1, 4, 5, 6, 7, 10, 11, 12, 13, 8];
        assert_eq!(label_span(&tokens, &motifs), Some((5, 8)));
        assert_eq!(label_classification(&tokens, &motifs[0]), 1);
        assert_eq!(label_classification(&tokens[..8], &motifs[0]), 0);
        let twice = [1, 10, 11, 12, 13, 10, 11, 12, 13];
        assert_eq!(label_span(&twice, &motifs), None);
        assert_eq!(label_pair(&[CLS, 5, 6, 7, SEP, 5, 6, 7]), Some(1));
        assert_eq!(label_pair(&[CLS, 5, 6, 7, SEP, 5, 9, 7]), Some(0));
        assert_eq!(label_pair(&[CLS, 5, 6, 7, 8, 5, 6, 7]), None);
    }

    #[test]
    fn f1_values() {
        assert_eq!(span_f1((5, 8), (5, 8)), 1.0);
        assert_eq!(span_f1((0, 1), (5, 8)), 0.0);
        assert_eq!(span_f1((3, 2), (2, 3)), 0.0);
        // 2 of 4 predicted, 2 of 4 gold
        assert!((span_f1((3, 6), (5, 8)) - 0.5).abs() < 1e-12);
        // single correct token: p = 1, r = 1/4
        assert!((span_f1((5, 5), (5, 8)) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_inputs() {
        let mut corpus = generate_corpus(&CorpusSpec { num_sequences: 5, ..CorpusSpec::default() }).unwrap();
        assert!(build_tasks(&corpus, &TaskSizes { train: 1, ..Default::default() }).is_err());
        corpus.sequences.clear();
        assert!(build_tasks(&corpus, &TaskSizes::default()).is_err());
    }
}
