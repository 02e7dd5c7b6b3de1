//! Synthetic corpus, proxy tasks and the gene fitness evaluator.

pub mod corpus;
mod evaluator;
pub mod external;
mod finetune;
pub mod tasks;

use thiserror::Error;

use crate::distillation::DistillError;
use crate::mapping_space::MappingError;
use crate::tinyformer::ModelError;

pub use corpus::{generate_corpus, CorpusSpec, Grammar, SyntheticCorpus};
pub use evaluator::{evaluate_gene, ProxyConfig, ProxyEvaluator, FAILURE_FITNESS};
pub use external::ExternalEvaluator;
pub use finetune::{finetune_and_score, FinetuneConfig, TaskScores};
pub use tasks::{build_tasks, ProxyTaskSuite, TaskSizes, TASK_NAMES};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("invalid proxy setup: {0}")]
    Spec(String),
    #[error("fine-tuning diverged on task {task} at step {step}")]
    Diverged { task: String, step: usize },
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}
