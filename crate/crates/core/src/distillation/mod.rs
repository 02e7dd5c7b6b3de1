//! Layer-wise distillation of a student under a layer mapping.
//!
//! For each student layer `m` with a teacher layer `g(m)`:
//!
//! ```text
//! L_m = (1/h) Σ_i ||A_i^S − A_i^T||_F² + ||H^S W_h − H^T||_F²
//! ```
//!
//! summed over supervised layers and averaged over the sequences of a
//! batch. Layers mapped to `None` contribute nothing.

mod pretrain;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping_space::{LayerMapping, MappingError};
use crate::optim::{clip_grad_norm, Adam, Schedule};
use crate::rng::{stream, Rng};
use crate::tinyformer::linalg::{matmul, matmul_nt, matmul_tn_acc};
use crate::tinyformer::{truncated_normal, write_snapshot, ActivationGrads, Encoder, LayerActivations, ModelError, TransformerConfig};

pub use pretrain::{mask_tokens, pretrain_teacher, MlmModel, PretrainConfig, Pretrained};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("loss diverged at step {step} ({loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, learning_rate: 1e-3, warmup_fraction: 0.1, clip_norm: 1.0, seed: 13 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            problems.push("warmup_fraction must lie in [0, 1]".to_string());
        }
        if !(self.clip_norm > 0.0) {
            problems.push("clip_norm must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DistillError::Config(problems.join("; ")))
        }
    }
}

/// `W_h` for one supervised student layer (`d_student × d_teacher`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub student_layer: usize,
    pub teacher_layer: usize,
    pub d_student: usize,
    pub d_teacher: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub projections: Vec<Projection>,
}

impl ProjectionSet {
    fn build(mapping: &LayerMapping, d_student: usize, d_teacher: usize, mut init: impl FnMut(usize, usize) -> f64) -> Self {
        let projections = mapping
            .supervised_pairs()
            .into_iter()
            .map(|(m, t)| Projection {
                student_layer: m,
                teacher_layer: t,
                d_student,
                d_teacher,
                weights: (0..d_student * d_teacher).map(|i| init(i / d_teacher, i % d_teacher)).collect(),
            })
            .collect();
        Self { projections }
    }

    pub fn new(mapping: &LayerMapping, d_student: usize, d_teacher: usize, rng: &mut Rng) -> Self {
        Self::build(mapping, d_student, d_teacher, |_, _| truncated_normal(rng, 0.02))
    }

    /// Identity projections (requires equal widths).
    pub fn identity(mapping: &LayerMapping, d: usize) -> Self {
        Self::build(mapping, d, d, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn num_params(&self) -> usize {
        self.projections.iter().map(|p| p.weights.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    fn parts_mut(&mut self) -> Vec<&mut [f64]> {
        self.projections.iter_mut().map(|p| p.weights.as_mut_slice()).collect()
    }
}

fn check_pair(s: &LayerActivations<'_>, t: &LayerActivations<'_>, w_h: &[f64]) -> Result<(), DistillError> {
    if s.heads != t.heads {
        return Err(DistillError::Mismatch(format!("student has {} heads, teacher {}", s.heads, t.heads)));
    }
    if s.len != t.len {
        return Err(DistillError::Mismatch(format!("student sequence length {} != teacher {}", s.len, t.len)));
    }
    if w_h.len() != s.hidden_size * t.hidden_size {
        return Err(DistillError::Mismatch(format!(
            "W_h has {} entries, expected {}×{}",
            w_h.len(),
            s.hidden_size,
            t.hidden_size
        )));
    }
    Ok(())
}

/// Loss of one student layer against one teacher layer for one sequence.
pub fn layer_loss(student: &LayerActivations<'_>, teacher: &LayerActivations<'_>, w_h: &[f64]) -> Result<f64, DistillError> {
    Ok(layer_loss_terms(student, teacher, w_h)?.0)
}

/// Returns `(loss, attention_term, hidden_term, residual)` where
/// `residual = H^S W_h − H^T`.
fn layer_loss_terms(
    student: &LayerActivations<'_>,
    teacher: &LayerActivations<'_>,
    w_h: &[f64],
) -> Result<(f64, f64, f64, Vec<f64>), DistillError> {
    check_pair(student, teacher, w_h)?;
    let attn: f64 = student
        .attention_scores
        .iter()
        .zip(teacher.attention_scores)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / student.heads as f64;
    let mut residual = vec![0.0; student.len * teacher.hidden_size];
    matmul(student.hidden_states, w_h, &mut residual, student.len, student.hidden_size, teacher.hidden_size);
    for (r, t) in residual.iter_mut().zip(teacher.hidden_states) {
        *r -= t;
    }
    let hidden: f64 = residual.iter().map(|r| r * r).sum();
    Ok((attn + hidden, attn, hidden, residual))
}

/// Teacher scores and hidden states for the layers a run needs.
#[derive(Debug, Clone)]
pub struct LayerTarget {
    pub scores: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Frozen teacher activations, computed once per corpus.
#[derive(Debug, Clone)]
pub struct TeacherActivations {
    pub heads: usize,
    pub hidden_size: usize,
    pub sequences: Vec<Vec<u32>>,
    /// `targets[seq][layer - 1]`, `None` for layers that were not kept.
    targets: Vec<Vec<Option<LayerTarget>>>,
}

impl TeacherActivations {
    /// Keeps every layer listed in `layers` (1-based); an empty list keeps
    /// all of them.
    pub fn compute(teacher: &Encoder, sequences: &[Vec<u32>], layers: &[usize]) -> Result<Self, DistillError> {
        if sequences.is_empty() {
            return Err(DistillError::EmptyCorpus);
        }
        let n = teacher.config().layers;
        let keep: Vec<bool> = (1..=n).map(|l| layers.is_empty() || layers.contains(&l)).collect();
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n) {
            return Err(DistillError::Mismatch(format!("teacher has no layer {bad}")));
        }
        let targets = sequences
            .iter()
            .map(|seq| {
                let f = teacher.forward(seq, None)?;
                Ok((1..=n)
                    .map(|l| keep[l - 1].then(|| LayerTarget { scores: f.scores(l).to_vec(), hidden: f.hidden(l).to_vec() }))
                    .collect())
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            heads: teacher.config().heads,
            hidden_size: teacher.config().hidden_size,
            sequences: sequences.to_vec(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn layer(&self, seq: usize, layer: usize) -> Option<LayerActivations<'_>> {
        let t = self.targets.get(seq)?.get(layer.checked_sub(1)?)?.as_ref()?;
        Some(LayerActivations {
            attention_scores: &t.scores,
            hidden_states: &t.hidden,
            heads: self.heads,
            len: self.sequences[seq].len(),
            hidden_size: self.hidden_size,
        })
    }
}

/// Layer-wise objective over the sequences `batch` (indices into
/// `targets`), mean-reduced over the batch. Returns the loss and, when
/// `grads` is given, accumulates the gradients for student parameters and
/// projections (concatenated in projection order).
pub fn objective(
    student: &Encoder,
    projections: &ProjectionSet,
    targets: &TeacherActivations,
    batch: &[usize],
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64, DistillError> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let c = student.config();
    let mut total = 0.0;
    for &i in batch {
        let seq = &targets.sequences[i];
        let fwd = student.forward(seq, None)?;
        let mut up = ActivationGrads::new(c, seq.len());
        let mut offset = 0;
        for p in &projections.projections {
            let s = fwd.activations(p.student_layer);
            let t = targets
                .layer(i, p.teacher_layer)
                .ok_or_else(|| DistillError::Mismatch(format!("teacher layer {} was not cached", p.teacher_layer)))?;
            let (loss, _, _, residual) = layer_loss_terms(&s, &t, &p.weights)?;
            total += loss * scale;
            if let Some((_, g_proj)) = grads.as_mut() {
                let g = 2.0 * scale;
                let ds = up.scores_mut(p.student_layer);
                for ((d, a), b) in ds.iter_mut().zip(s.attention_scores).zip(t.attention_scores) {
                    *d += g / c.heads as f64 * (a - b);
                }
                let scaled: Vec<f64> = residual.iter().map(|r| g * r).collect();
                matmul_tn_acc(s.hidden_states, &scaled, &mut g_proj[offset..offset + p.weights.len()], seq.len(), p.d_student, p.d_teacher);
                let mut dh = vec![0.0; seq.len() * p.d_student];
                matmul_nt(&scaled, &p.weights, &mut dh, seq.len(), p.d_teacher, p.d_student);
                for (a, b) in up.hidden_mut(p.student_layer).iter_mut().zip(&dh) {
                    *a += b;
                }
            }
            offset += p.weights.len();
        }
        if let Some((g_student, _)) = grads.as_mut() {
            student.backward(&fwd, &up, g_student)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Encoder,
    pub projections: ProjectionSet,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

impl DistillOutcome {
    /// Mean loss over the first and last tenth of the steps.
    pub fn decile_means(&self) -> (f64, f64) {
        decile_means(&self.losses)
    }
}

pub fn decile_means(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1).min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}

fn check_compatible(teacher: &TransformerConfig, student: &TransformerConfig, mapping: &LayerMapping) -> Result<(), DistillError> {
    if student.heads != teacher.heads {
        return Err(DistillError::Mismatch(format!("student has {} heads, teacher {}", student.heads, teacher.heads)));
    }
    if student.vocab_size != teacher.vocab_size {
        return Err(DistillError::Mismatch("student and teacher vocabularies differ".into()));
    }
    if mapping.len() != student.layers {
        return Err(DistillError::Mismatch(format!("mapping has {} entries for a {}-layer student", mapping.len(), student.layers)));
    }
    if let Some((_, t)) = mapping.supervised_pairs().into_iter().find(|&(_, t)| t == 0 || t > teacher.layers) {
        return Err(DistillError::Mismatch(format!("mapping refers to teacher layer {t} of {}", teacher.layers)));
    }
    if mapping.supervised_pairs().is_empty() {
        return Err(DistillError::Mismatch("mapping supervises no layer".into()));
    }
    Ok(())
}

/// Distills a freshly initialised student against precomputed teacher
/// activations.
pub fn distill_with_targets(
    teacher_config: &TransformerConfig,
    targets: &TeacherActivations,
    student_config: TransformerConfig,
    mapping: &LayerMapping,
    config: &DistillConfig,
) -> Result<DistillOutcome, DistillError> {
    config.validate()?;
    check_compatible(teacher_config, &student_config, mapping)?;
    if targets.is_empty() {
        return Err(DistillError::EmptyCorpus);
    }
    let mut student = Encoder::new(student_config)?;
    let mut rng = stream(config.seed, &[0x70726f6a]);
    let mut projections = ProjectionSet::new(mapping, student.config().hidden_size, teacher_config.hidden_size, &mut rng);
    let (n_s, n_p) = (student.num_params(), projections.num_params());
    let mut opt = Adam::new(n_s + n_p);
    let schedule = Schedule::new(config.learning_rate, config.warmup_fraction, config.steps);
    let mut batch_rng = stream(config.seed, &[0x6261746368]);
    let mut grad = vec![0.0; n_s + n_p];
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.random_range(0..targets.len())).collect();
        grad.fill(0.0);
        let (g_s, g_p) = grad.split_at_mut(n_s);
        let loss = objective(&student, &projections, targets, &batch, Some((g_s, g_p)))?;
        if !loss.is_finite() {
            return Err(DistillError::Diverged { step, loss });
        }
        losses.push(loss);
        clip_grad_norm(&mut grad, config.clip_norm);
        let mut parts = vec![student.params_mut()];
        parts.extend(projections.parts_mut());
        opt.step_parts(&mut parts, &grad, schedule.lr(step));
    }
    Ok(DistillOutcome { student, projections, losses })
}

/// Distills a student from `teacher` on `corpus`. The teacher is only read.
pub fn distill(
    teacher: &Encoder,
    student_config: TransformerConfig,
    mapping: &LayerMapping,
    corpus: &[Vec<u32>],
    config: &DistillConfig,
) -> Result<DistillOutcome, DistillError> {
    check_compatible(teacher.config(), &student_config, mapping)?;
    let layers: Vec<usize> = mapping.supervised_pairs().into_iter().map(|(_, t)| t).collect();
    let targets = TeacherActivations::compute(teacher, corpus, &layers)?;
    distill_with_targets(teacher.config(), &targets, student_config, mapping, config)
}

/// Structured record written next to a student snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillManifest {
    pub version: String,
    pub mapping: String,
    pub teacher: TransformerConfig,
    pub student: TransformerConfig,
    pub distill: DistillConfig,
    pub seed: u64,
    pub first_decile_loss: f64,
    pub last_decile_loss: f64,
    pub final_loss: f64,
    pub snapshot: String,
    #[serde(default)]
    pub task_scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub fitness: Option<f64>,
}

impl DistillManifest {
    pub fn new(teacher: &TransformerConfig, outcome: &DistillOutcome, mapping: &LayerMapping, config: &DistillConfig, snapshot: &str) -> Self {
        let (first, last) = outcome.decile_means();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            mapping: mapping.to_string(),
            teacher: teacher.clone(),
            student: outcome.student.config().clone(),
            distill: config.clone(),
            seed: config.seed,
            first_decile_loss: first,
            last_decile_loss: last,
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
            snapshot: snapshot.to_string(),
            task_scores: BTreeMap::new(),
            fitness: None,
        }
    }
}

/// Writes `<stem>.bin` (weights) and `<stem>.json` (manifest) into `dir`.
pub fn save_outcome(dir: &Path, stem: &str, outcome: &DistillOutcome, manifest: &DistillManifest) -> Result<(), DistillError> {
    std::fs::create_dir_all(dir)?;
    write_snapshot(&outcome.student, &dir.join(format!("{stem}.bin")))?;
    let json = serde_json::to_string_pretty(manifest)?;
    crate::evolution::write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy_tasks::corpus::{generate_corpus, CorpusSpec};
    use rand::SeedableRng;

    fn cfg(layers: usize, d: usize, seed: u64) -> TransformerConfig {
        TransformerConfig { layers, hidden_size: d, ffn_size: 2 * d, heads: 2, vocab_size: 64, max_seq_len: 16, seed }
    }

    fn corpus(n: usize) -> Vec<Vec<u32>> {
        generate_corpus(&CorpusSpec { num_sequences: n, ..CorpusSpec::default() }).unwrap().sequences
    }

    fn perturbed(c: TransformerConfig, seed: u64) -> Encoder {
        let mut e = Encoder::new(c).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        e.params_mut().iter_mut().for_each(|p| *p += rng.random_range(-0.3..0.3));
        e
    }

    #[test]
    fn self_distillation_loss_is_zero() {
        let teacher = perturbed(cfg(4, 8, 1), 2);
        let student = teacher.clone();
        let mapping = LayerMapping::from_zero_none(&[1, 2, 3, 4]);
        let targets = TeacherActivations::compute(&teacher, &corpus(6), &[]).unwrap();
        let proj = ProjectionSet::identity(&mapping, 8);
        let loss = objective(&student, &proj, &targets, &[0, 1, 2, 3, 4, 5], None).unwrap();
        assert!(loss.abs() < 1e-10, "{loss}");
    }

    #[test]
    fn all_ones_attention_difference_gives_four() {
        let a_t = vec![0.3, -1.0, 2.0, 0.5];
        let a_s: Vec<f64> = a_t.iter().map(|v| v + 1.0).collect();
        let h = vec![0.0; 2];
        let s = LayerActivations { attention_scores: &a_s, hidden_states: &h, heads: 1, len: 2, hidden_size: 1 };
        let t = LayerActivations { attention_scores: &a_t, hidden_states: &h, heads: 1, len: 2, hidden_size: 1 };
        assert_eq!(layer_loss(&s, &t, &[1.0]).unwrap(), 4.0);
    }

    #[test]
    fn layer_loss_matches_elementwise_oracle() {
        let mut rng = Rng::seed_from_u64(9);
        let (h, len, ds, dt) = (3, 4, 5, 6);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (a_s, a_t, h_s, h_t, w) = (r(h * len * len), r(h * len * len), r(len * ds), r(len * dt), r(ds * dt));
        let s = LayerActivations { attention_scores: &a_s, hidden_states: &h_s, heads: h, len, hidden_size: ds };
        let t = LayerActivations { attention_scores: &a_t, hidden_states: &h_t, heads: h, len, hidden_size: dt };
        let got = layer_loss(&s, &t, &w).unwrap();
        let mut want = 0.0;
        for head in 0..h {
            let mut frob = 0.0;
            for i in 0..len {
                for j in 0..len {
                    let k = head * len * len + i * len + j;
                    frob += (a_s[k] - a_t[k]) * (a_s[k] - a_t[k]);
                }
            }
            want += frob / h as f64;
        }
        for i in 0..len {
            for j in 0..dt {
                let mut proj = 0.0;
                for p in 0..ds {
                    proj += h_s[i * ds + p] * w[p * dt + j];
                }
                want += (proj - h_t[i * dt + j]).powi(2);
            }
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got >= 0.0);
    }

    #[test]
    fn layer_loss_shape_errors() {
        let a = vec![0.0; 4];
        let h = vec![0.0; 4];
        let s = LayerActivations { attention_scores: &a, hidden_states: &h, heads: 1, len: 2, hidden_size: 2 };
        let t2 = LayerActivations { heads: 2, ..s };
        assert!(layer_loss(&s, &t2, &[0.0; 4]).is_err());
        let t3 = LayerActivations { len: 3, ..s };
        assert!(layer_loss(&s, &t3, &[0.0; 4]).is_err());
        assert!(layer_loss(&s, &s, &[0.0; 3]).is_err());
    }

    #[test]
    fn projection_gradient_has_closed_form() {
        // d/dW ||H W − T||² = 2 Hᵀ (H W − T)
        let mut rng = Rng::seed_from_u64(4);
        let teacher = perturbed(cfg(2, 8, 5), 6);
        let student = perturbed(cfg(2, 4, 7), 8);
        let mapping = LayerMapping::new(vec![None, Some(2)]);
        let seqs = corpus(1);
        let targets = TeacherActivations::compute(&teacher, &seqs, &[]).unwrap();
        let proj = ProjectionSet::new(&mapping, 4, 8, &mut rng);
        let mut gs = vec![0.0; student.num_params()];
        let mut gp = vec![0.0; proj.num_params()];
        objective(&student, &proj, &targets, &[0], Some((&mut gs, &mut gp))).unwrap();
        let f = student.forward(&seqs[0], None).unwrap();
        let hs = f.hidden(2);
        let ht = targets.layer(0, 2).unwrap().hidden_states;
        let len = seqs[0].len();
        let mut res = vec![0.0; len * 8];
        matmul(hs, &proj.projections[0].weights, &mut res, len, 4, 8);
        res.iter_mut().zip(ht).for_each(|(r, t)| *r = 2.0 * (*r - t));
        let mut want = vec![0.0; 32];
        matmul_tn_acc(hs, &res, &mut want, len, 4, 8);
        for (a, b) in gp.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn objective_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(21);
        let teacher = perturbed(cfg(3, 8, 1), 2);
        let student = perturbed(cfg(2, 4, 3), 4);
        let mapping = LayerMapping::new(vec![Some(1), Some(3)]);
        let targets = TeacherActivations::compute(&teacher, &corpus(2), &[]).unwrap();
        let proj = ProjectionSet::new(&mapping, 4, 8, &mut rng);
        let batch = [0, 1];
        let mut gs = vec![0.0; student.num_params()];
        let mut gp = vec![0.0; proj.num_params()];
        objective(&student, &proj, &targets, &batch, Some((&mut gs, &mut gp))).unwrap();
        let eps = 1e-5;
        for _ in 0..100 {
            let i = rng.random_range(0..gs.len() + gp.len());
            let eval = |delta: f64| {
                let (mut s, mut p) = (student.clone(), proj.clone());
                if i < gs.len() {
                    s.params_mut()[i] += delta;
                } else {
                    let mut j = i - gs.len();
                    for pr in &mut p.projections {
                        if j < pr.weights.len() {
                            pr.weights[j] += delta;
                            break;
                        }
                        j -= pr.weights.len();
                    }
                }
                objective(&s, &p, &targets, &batch, None).unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = if i < gs.len() { gs[i] } else { gp[i - gs.len()] };
            let rel = (numeric - analytic).abs() / (analytic.abs() + 1e-8);
            assert!(rel < 1e-4 || (numeric - analytic).abs() < 1e-9, "coord {i}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn none_layers_are_gated_out() {
        let teacher = perturbed(cfg(3, 8, 1), 2);
        let student = perturbed(cfg(3, 8, 3), 4);
        let mapping = LayerMapping::new(vec![None, None, Some(3)]);
        let proj = ProjectionSet::identity(&mapping, 8);
        assert_eq!(proj.len(), 1);
        assert_eq!(proj.projections[0].student_layer, 3);
        let seqs = corpus(2);
        let full = TeacherActivations::compute(&teacher, &seqs, &[]).unwrap();
        let only3 = TeacherActivations::compute(&teacher, &seqs, &[3]).unwrap();
        assert!(only3.layer(0, 1).is_none());
        // the objective never looks at teacher layers other than 3
        let mut g1 = (vec![0.0; student.num_params()], vec![0.0; proj.num_params()]);
        let mut g2 = g1.clone();
        let l1 = objective(&student, &proj, &full, &[0, 1], Some((&mut g1.0, &mut g1.1))).unwrap();
        let l2 = objective(&student, &proj, &only3, &[0, 1], Some((&mut g2.0, &mut g2.1))).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        // and equals the single active term
        let f = student.forward(&seqs[0], None).unwrap();
        let t = full.layer(0, 3).unwrap();
        let single = layer_loss(&f.activations(3), &t, &proj.projections[0].weights).unwrap();
        let l0 = objective(&student, &proj, &full, &[0], None).unwrap();
        assert_eq!(l0, single);
    }

    #[test]
    fn sparse_mapping_creates_two_projections() {
        let mapping = LayerMapping::from_zero_none(&[0, 0, 5, 10]);
        let p = ProjectionSet::new(&mapping, 16, 32, &mut Rng::seed_from_u64(0));
        let layers: Vec<(usize, usize)> = p.projections.iter().map(|p| (p.student_layer, p.teacher_layer)).collect();
        assert_eq!(layers, vec![(3, 5), (4, 10)]);
        assert!(p.projections.iter().all(|p| p.weights.len() == 16 * 32));
    }

    #[test]
    fn distill_is_deterministic_reduces_loss_and_freezes_teacher() {
        let teacher = perturbed(cfg(4, 16, 1), 2);
        let before = teacher.params().to_vec();
        let mapping = LayerMapping::from_zero_none(&[0, 2, 4]);
        let seqs = corpus(64);
        let dc = DistillConfig { steps: 120, batch_size: 8, learning_rate: 3e-3, ..Default::default() };
        let a = distill(&teacher, cfg(3, 8, 9), &mapping, &seqs, &dc).unwrap();
        let b = distill(&teacher, cfg(3, 8, 9), &mapping, &seqs, &dc).unwrap();
        assert_eq!(a.student.params(), b.student.params());
        assert_eq!(a.projections, b.projections);
        assert_eq!(a.losses, b.losses);
        assert!(teacher.params().iter().zip(&before).all(|(x, y)| x.to_bits() == y.to_bits()));
        let (first, last) = a.decile_means();
        assert!(last <= first, "{first} -> {last}");
        assert_eq!(a.projections.len(), 2);
    }

    #[test]
    fn distill_rejects_incompatible_inputs() {
        let teacher = Encoder::new(cfg(4, 8, 1)).unwrap();
        let seqs = corpus(4);
        let dc = DistillConfig { steps: 1, batch_size: 1, ..Default::default() };
        let wrong_heads = TransformerConfig { heads: 4, ..cfg(2, 8, 0) };
        let m2 = LayerMapping::new(vec![None, Some(4)]);
        assert!(distill(&teacher, wrong_heads, &m2, &seqs, &dc).is_err());
        let m3 = LayerMapping::new(vec![None, None, Some(4)]);
        assert!(distill(&teacher, cfg(2, 8, 0), &m3, &seqs, &dc).is_err());
        assert!(distill(&teacher, cfg(2, 8, 0), &LayerMapping::new(vec![None, Some(5)]), &seqs, &dc).is_err());
        assert!(distill(&teacher, cfg(2, 8, 0), &m2, &[], &dc).is_err());
        let zero = DistillConfig { steps: 0, ..dc };
        assert!(distill(&teacher, cfg(2, 8, 0), &m2, &seqs, &zero).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let teacher = perturbed(cfg(2, 8, 1), 2);
        let mapping = LayerMapping::new(vec![Some(1), Some(2)]);
        let dc = DistillConfig { steps: 5, batch_size: 2, ..Default::default() };
        let out = distill(&teacher, cfg(2, 8, 3), &mapping, &corpus(8), &dc).unwrap();
        let m = DistillManifest::new(teacher.config(), &out, &mapping, &dc, "student.bin");
        let dir = tempfile::tempdir().unwrap();
        save_outcome(dir.path(), "student", &out, &m).unwrap();
        let text = std::fs::read_to_string(dir.path().join("student.json")).unwrap();
        let back: DistillManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let snap = crate::tinyformer::read_snapshot(&dir.path().join("student.bin")).unwrap();
        assert_eq!(snap.params(), out.student.params());
    }
}
