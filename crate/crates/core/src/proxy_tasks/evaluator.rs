//! Gene → fitness: distill on the proxy corpus, fine-tune, average the dev
//! metrics.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::corpus::SyntheticCorpus;
use super::finetune::{finetune_and_score, FinetuneConfig};
use super::tasks::{build_tasks, ProxyTaskSuite, TaskSizes};
use super::ProxyError;
use crate::distillation::{distill_with_targets, DistillConfig, DistillError, TeacherActivations};
use crate::evolution::{EvalError, EvalRequest, Evaluation, FitnessEvaluator};
use crate::mapping_space::{decode, Gene, LayerMapping, SearchSpace};
use crate::tinyformer::{Encoder, TransformerConfig};

/// Fitness assigned to a gene whose pipeline diverged.
pub const FAILURE_FITNESS: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    /// Fraction of the corpus used for distillation.
    pub rho: f64,
    pub tasks: TaskSizes,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    /// Seed of the subsample draw.
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { rho: 0.1, tasks: TaskSizes::default(), distill: DistillConfig::default(), finetune: FinetuneConfig::default(), seed: 23 }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<(), ProxyError> {
        let mut problems = Vec::new();
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            problems.push(format!("rho {} is outside (0, 1]", self.rho));
        }
        if let Err(e) = self.distill.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.finetune.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ProxyError::Spec(problems.join("; ")))
        }
    }
}

/// Every gene gets the same student initialisation, batch order and
/// fine-tuning seeds, so the fitness depends on the mapping alone.
pub struct ProxyEvaluator {
    teacher_config: TransformerConfig,
    student_config: TransformerConfig,
    targets: Arc<TeacherActivations>,
    suite: Arc<ProxyTaskSuite>,
    config: ProxyConfig,
    memo: Mutex<HashMap<String, Evaluation>>,
    computed: AtomicUsize,
}

impl ProxyEvaluator {
    pub fn new(teacher: &Encoder, student_config: TransformerConfig, corpus: &SyntheticCorpus, config: ProxyConfig) -> Result<Self, ProxyError> {
        config.validate()?;
        let suite = Arc::new(build_tasks(corpus, &config.tasks)?);
        let subset = corpus.subsample(config.rho, config.seed)?;
        let targets = Arc::new(TeacherActivations::compute(teacher, &subset, &[])?);
        Self::with_parts(teacher.config().clone(), student_config, targets, suite, config)
    }

    /// Builds an evaluator around already computed teacher activations and
    /// task suite.
    pub fn with_parts(
        teacher_config: TransformerConfig,
        student_config: TransformerConfig,
        targets: Arc<TeacherActivations>,
        suite: Arc<ProxyTaskSuite>,
        config: ProxyConfig,
    ) -> Result<Self, ProxyError> {
        config.validate()?;
        student_config.validate()?;
        if student_config.heads != teacher_config.heads || student_config.vocab_size != teacher_config.vocab_size {
            return Err(ProxyError::Spec("student must share heads and vocabulary with the teacher".into()));
        }
        Ok(Self {
            teacher_config,
            student_config,
            targets,
            suite,
            config,
            memo: Mutex::new(HashMap::new()),
            computed: AtomicUsize::new(0),
        })
    }

    pub fn suite(&self) -> &Arc<ProxyTaskSuite> {
        &self.suite
    }

    pub fn targets(&self) -> &Arc<TeacherActivations> {
        &self.targets
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    /// Number of pipeline runs (memo hits excluded).
    pub fn evaluations(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    pub fn evaluate_mapping(&self, mapping: &LayerMapping) -> Result<Evaluation, ProxyError> {
        let key = mapping.to_string();
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(hit.clone());
        }
        self.computed.fetch_add(1, Ordering::SeqCst);
        let evaluation = match self.run_pipeline(mapping) {
            Ok(e) => e,
            Err(err @ (ProxyError::Diverged { .. } | ProxyError::Distill(DistillError::Diverged { .. }))) => {
                log::warn!("mapping {key} failed: {err}; recording fitness {FAILURE_FITNESS}");
                Evaluation { failure: Some(err.to_string()), ..Evaluation::from_fitness(FAILURE_FITNESS) }
            }
            Err(err) => return Err(err),
        };
        self.memo.lock().expect("memo lock").insert(key, evaluation.clone());
        Ok(evaluation)
    }

    fn run_pipeline(&self, mapping: &LayerMapping) -> Result<Evaluation, ProxyError> {
        let outcome = distill_with_targets(&self.teacher_config, &self.targets, self.student_config.clone(), mapping, &self.config.distill)?;
        let scores = finetune_and_score(&outcome.student, &self.suite, &self.config.finetune)?;
        Ok(Evaluation { fitness: scores.fitness, task_scores: scores.as_map(), failure: None, loss_curve: outcome.losses })
    }
}

impl FitnessEvaluator for ProxyEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<Evaluation, EvalError> {
        self.evaluate_mapping(request.mapping).map_err(|e| EvalError(e.to_string()))
    }
}

/// Decodes `gene` and evaluates it.
pub fn evaluate_gene(gene: &Gene, space: &SearchSpace, evaluator: &ProxyEvaluator) -> Result<Evaluation, ProxyError> {
    let mapping = decode(gene, space)?;
    mapping.validate(space)?;
    evaluator.evaluate_mapping(&mapping)
}
