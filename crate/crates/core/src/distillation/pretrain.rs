//! Masked-token pretraining of the teacher.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::optim::{clip_grad_norm, Adam, Schedule};
use crate::proxy_tasks::corpus::{FIRST_CONTENT, MASK};
use crate::rng::{stream, Rng};
use crate::tinyformer::linalg::{argmax, cross_entropy};
use crate::tinyformer::{ActivationGrads, Encoder, Linear, TransformerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub mask_prob: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, learning_rate: 2e-3, warmup_fraction: 0.1, mask_prob: 0.15, clip_norm: 1.0, seed: 11 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            problems.push("warmup_fraction must lie in [0, 1]".to_string());
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            problems.push("mask_prob must lie in (0, 1)".to_string());
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

/// Encoder plus the vocabulary projection used only for pretraining.
#[derive(Debug, Clone)]
pub struct MlmModel {
    pub encoder: Encoder,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: MlmModel,
    pub losses: Vec<f64>,
}

/// Replaces a random subset (probability `prob`, at least one) of the
/// content positions by MASK. Returns the corrupted input and the masked
/// positions.
pub fn mask_tokens(tokens: &[u32], prob: f64, rng: &mut Rng) -> (Vec<u32>, Vec<usize>) {
    let eligible: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] >= FIRST_CONTENT).collect();
    let mut picked: Vec<usize> = eligible.iter().copied().filter(|_| rng.random_bool(prob)).collect();
    if picked.is_empty() && !eligible.is_empty() {
        picked.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut input = tokens.to_vec();
    for &i in &picked {
        input[i] = MASK;
    }
    (input, picked)
}

impl MlmModel {
    pub fn new(config: TransformerConfig) -> Result<Self, DistillError> {
        let encoder = Encoder::new(config)?;
        let c = encoder.config();
        let mut rng = stream(c.seed, &[0x6d6c6d]);
        let head = Linear::new(c.hidden_size, c.vocab_size, &mut rng);
        Ok(Self { encoder, head })
    }

    /// Summed cross-entropy over masked positions; accumulates gradients
    /// when `grads` is given. Returns `(loss_sum, masked_count, correct)`.
    fn masked_pass(
        &self,
        input: &[u32],
        original: &[u32],
        positions: &[usize],
        scale: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<(f64, usize, usize), DistillError> {
        let c = self.encoder.config();
        let d = c.hidden_size;
        let fwd = self.encoder.forward(input, None)?;
        let rows: Vec<f64> = positions.iter().flat_map(|&p| fwd.final_hidden()[p * d..(p + 1) * d].iter().copied()).collect();
        let logits = self.head.forward(&rows);
        let v = c.vocab_size;
        let mut dlogits = vec![0.0; logits.len()];
        let mut loss = 0.0;
        let mut correct = 0;
        for (r, &p) in positions.iter().enumerate() {
            let row = &logits[r * v..(r + 1) * v];
            loss += cross_entropy(row, original[p] as usize, &mut dlogits[r * v..(r + 1) * v]);
            correct += (argmax(row) == original[p] as usize) as usize;
        }
        if let Some((g_enc, g_head)) = grads {
            dlogits.iter_mut().for_each(|g| *g *= scale);
            let drows = self.head.backward(&rows, &dlogits, g_head);
            let mut up = ActivationGrads::new(c, input.len());
            let top = up.hidden_mut(c.layers);
            for (r, &p) in positions.iter().enumerate() {
                top[p * d..(p + 1) * d].copy_from_slice(&drows[r * d..(r + 1) * d]);
            }
            self.encoder.backward(&fwd, &up, g_enc)?;
        }
        Ok((loss, positions.len(), correct))
    }

    /// Masked-token accuracy with a fixed masking seed.
    pub fn masked_accuracy(&self, sequences: &[Vec<u32>], mask_prob: f64, seed: u64) -> Result<f64, DistillError> {
        let mut rng = stream(seed, &[0x616363]);
        let (mut total, mut correct) = (0usize, 0usize);
        for seq in sequences {
            let (input, pos) = mask_tokens(seq, mask_prob, &mut rng);
            let (_, n, c) = self.masked_pass(&input, seq, &pos, 0.0, None)?;
            total += n;
            correct += c;
        }
        if total == 0 {
            return Err(DistillError::EmptyCorpus);
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Trains a teacher from scratch with masked-token prediction. The loss
/// of each step is the mean cross-entropy over its masked positions.
pub fn pretrain_teacher(config: TransformerConfig, corpus: &[Vec<u32>], pc: &PretrainConfig) -> Result<Pretrained, DistillError> {
    pc.validate()?;
    if corpus.is_empty() {
        return Err(DistillError::EmptyCorpus);
    }
    let mut model = MlmModel::new(config)?;
    let n_enc = model.encoder.num_params();
    let n_head = model.head.params.len();
    let mut opt = Adam::new(n_enc + n_head);
    let schedule = Schedule::new(pc.learning_rate, pc.warmup_fraction, pc.steps);
    let mut rng = stream(pc.seed, &[0x707265]);
    let mut grad = vec![0.0; n_enc + n_head];
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let batch: Vec<(Vec<u32>, Vec<u32>, Vec<usize>)> = (0..pc.batch_size)
            .map(|_| {
                let seq = &corpus[rng.random_range(0..corpus.len())];
                let (input, pos) = mask_tokens(seq, pc.mask_prob, &mut rng);
                (input, seq.clone(), pos)
            })
            .collect();
        let masked: usize = batch.iter().map(|b| b.2.len()).sum();
        let scale = 1.0 / masked.max(1) as f64;
        grad.fill(0.0);
        let (g_enc, g_head) = grad.split_at_mut(n_enc);
        let mut loss = 0.0;
        for (input, original, pos) in &batch {
            loss += model.masked_pass(input, original, pos, scale, Some((&mut *g_enc, &mut *g_head)))?.0;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(DistillError::Diverged { step, loss });
        }
        losses.push(loss);
        clip_grad_norm(&mut grad, pc.clip_norm);
        opt.step_parts(&mut [model.encoder.params_mut(), &mut model.head.params], &grad, schedule.lr(step));
    }
    Ok(Pretrained { model, losses })
}
