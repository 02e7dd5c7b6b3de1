//! Fine-tuning a distilled student on each proxy task.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tasks::{span_f1, ClassExample, ProxyTaskSuite, SpanExample, TASK_NAMES};
use super::ProxyError;
use crate::optim::{clip_grad_norm, Adam, Schedule};
use crate::rng::stream;
use crate::tinyformer::linalg::{argmax, cross_entropy};
use crate::tinyformer::{ActivationGrads, Encoder, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 32, learning_rate: 1e-3, warmup_fraction: 0.1, clip_norm: 1.0, seed: 19 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), ProxyError> {
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
        if !(self.clip_norm > 0.0) {
            problems.push("clip_norm must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ProxyError::Spec(format!("invalid fine-tuning config: {}", problems.join("; "))))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub classification: f64,
    pub pair: f64,
    pub span: f64,
    pub fitness: f64,
}

impl TaskScores {
    pub fn new(classification: f64, pair: f64, span: f64) -> Self {
        Self { classification, pair, span, fitness: (classification + pair + span) / 3.0 }
    }

    pub fn as_map(&self) -> BTreeMap<String, f64> {
        TASK_NAMES.iter().map(|n| n.to_string()).zip([self.classification, self.pair, self.span]).collect()
    }
}

/// A task a student can be fine-tuned on: per-example loss/gradient and a
/// dev-set metric.
trait Task {
    type Example;
    const OUTPUTS: usize;

    /// Loss for one example; when `grads` is given, accumulates `scale`
    /// times its gradient.
    fn example_loss(
        encoder: &Encoder,
        head: &Linear,
        ex: &Self::Example,
        scale: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<f64, ProxyError>;

    fn metric(encoder: &Encoder, head: &Linear, dev: &[Self::Example]) -> Result<f64, ProxyError>;
}

struct Classify;

impl Task for Classify {
    type Example = ClassExample;
    const OUTPUTS: usize = 2;

    fn example_loss(
        encoder: &Encoder,
        head: &Linear,
        ex: &ClassExample,
        scale: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<f64, ProxyError> {
        let d = encoder.config().hidden_size;
        let fwd = encoder.forward(&ex.tokens, None)?;
        let first = &fwd.final_hidden()[..d];
        let logits = head.forward(first);
        let mut dlogits = [0.0; 2];
        let loss = cross_entropy(&logits, ex.label, &mut dlogits);
        if let Some((g_enc, g_head)) = grads {
            dlogits.iter_mut().for_each(|g| *g *= scale);
            let dh = head.backward(first, &dlogits, g_head);
            let mut up = ActivationGrads::new(encoder.config(), ex.tokens.len());
            up.hidden_mut(encoder.config().layers)[..d].copy_from_slice(&dh);
            encoder.backward(&fwd, &up, g_enc)?;
        }
        Ok(loss)
    }

    fn metric(encoder: &Encoder, head: &Linear, dev: &[ClassExample]) -> Result<f64, ProxyError> {
        let d = encoder.config().hidden_size;
        let mut correct = 0;
        for ex in dev {
            let fwd = encoder.forward(&ex.tokens, None)?;
            correct += usize::from(argmax(&head.forward(&fwd.final_hidden()[..d])) == ex.label);
        }
        Ok(correct as f64 / dev.len() as f64)
    }
}

struct Span;

impl Span {
    /// Start and end logits over positions.
    fn logits(encoder: &Encoder, head: &Linear, tokens: &[u32]) -> Result<(Vec<f64>, Vec<f64>), ProxyError> {
        let fwd = encoder.forward(tokens, None)?;
        let out = head.forward(fwd.final_hidden());
        Ok((out.iter().step_by(2).copied().collect(), out.iter().skip(1).step_by(2).copied().collect()))
    }

    /// Best start, then the best end at or after it.
    pub fn predict(start: &[f64], end: &[f64]) -> (usize, usize) {
        let s = argmax(start);
        (s, s + argmax(&end[s..]))
    }
}

impl Task for Span {
    type Example = SpanExample;
    const OUTPUTS: usize = 2;

    fn example_loss(
        encoder: &Encoder,
        head: &Linear,
        ex: &SpanExample,
        scale: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<f64, ProxyError> {
        let len = ex.tokens.len();
        let fwd = encoder.forward(&ex.tokens, None)?;
        let hidden = fwd.final_hidden();
        let out = head.forward(hidden);
        let start: Vec<f64> = out.iter().step_by(2).copied().collect();
        let end: Vec<f64> = out.iter().skip(1).step_by(2).copied().collect();
        let (mut ds, mut de) = (vec![0.0; len], vec![0.0; len]);
        let loss = 0.5 * (cross_entropy(&start, ex.start, &mut ds) + cross_entropy(&end, ex.end, &mut de));
        if let Some((g_enc, g_head)) = grads {
            let mut dout = vec![0.0; 2 * len];
            for i in 0..len {
                dout[2 * i] = 0.5 * scale * ds[i];
                dout[2 * i + 1] = 0.5 * scale * de[i];
            }
            let dh = head.backward(hidden, &dout, g_head);
            let mut up = ActivationGrads::new(encoder.config(), len);
            up.hidden_mut(encoder.config().layers).copy_from_slice(&dh);
            encoder.backward(&fwd, &up, g_enc)?;
        }
        Ok(loss)
    }

    fn metric(encoder: &Encoder, head: &Linear, dev: &[SpanExample]) -> Result<f64, ProxyError> {
        let mut total = 0.0;
        for ex in dev {
            let (s, e) = Self::logits(encoder, head, &ex.tokens)?;
            total += span_f1(Self::predict(&s, &e), (ex.start, ex.end));
        }
        Ok(total / dev.len() as f64)
    }
}

fn run_task<T: Task>(student: &Encoder, train: &[T::Example], dev: &[T::Example], cfg: &FinetuneConfig, task: u64) -> Result<f64, ProxyError> {
    let mut encoder = student.clone();
    let mut rng = stream(cfg.seed, &[task]);
    let mut head = Linear::new(encoder.config().hidden_size, T::OUTPUTS, &mut rng);
    let (n_e, n_h) = (encoder.num_params(), head.params.len());
    let mut opt = Adam::new(n_e + n_h);
    let schedule = Schedule::new(cfg.learning_rate, cfg.warmup_fraction, cfg.steps);
    let mut grad = vec![0.0; n_e + n_h];
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        grad.fill(0.0);
        let (g_e, g_h) = grad.split_at_mut(n_e);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &train[rng.random_range(0..train.len())];
            loss += T::example_loss(&encoder, &head, ex, scale, Some((&mut *g_e, &mut *g_h)))? * scale;
        }
        if !loss.is_finite() {
            return Err(ProxyError::Diverged { task: TASK_NAMES[task as usize].to_string(), step });
        }
        clip_grad_norm(&mut grad, cfg.clip_norm);
        opt.step_parts(&mut [encoder.params_mut(), &mut head.params], &grad, schedule.lr(step));
    }
    let metric = T::metric(&encoder, &head, dev)?;
    if !metric.is_finite() {
        return Err(ProxyError::Diverged { task: TASK_NAMES[task as usize].to_string(), step: cfg.steps });
    }
    Ok(metric)
}

/// Fine-tunes a copy of `student` with a fresh head on each task and
/// scores the dev splits. `student` itself is not modified.
pub fn finetune_and_score(student: &Encoder, suite: &ProxyTaskSuite, cfg: &FinetuneConfig) -> Result<TaskScores, ProxyError> {
    cfg.validate()?;
    let c = student.config();
    let longest = suite.classification.train.iter().chain(&suite.pair.train).map(|e| e.tokens.len()).max().unwrap_or(0);
    if longest > c.max_seq_len {
        return Err(ProxyError::Spec(format!("student max_seq_len {} is shorter than task inputs ({longest})", c.max_seq_len)));
    }
    let classification = run_task::<Classify>(student, &suite.classification.train, &suite.classification.dev, cfg, 0)?;
    let pair = run_task::<Classify>(student, &suite.pair.train, &suite.pair.dev, cfg, 1)?;
    let span = run_task::<Span>(student, &suite.span.train, &suite.span.dev, cfg, 2)?;
    Ok(TaskScores::new(classification, pair, span))
}
