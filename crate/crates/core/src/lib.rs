//! Evolutionary search over teacher→student layer mappings for layer-wise
//! transformer distillation, with a small from-scratch transformer, a
//! synthetic proxy-task suite and brute-force oracles.

pub mod distillation;
pub mod evolution;
pub mod mapping_space;
pub mod optim;
pub mod oracle;
pub mod proxy_tasks;
pub mod rng;
pub mod stats;
pub mod tinyformer;

pub use distillation::{DistillConfig, PretrainConfig};
pub use evolution::{Evaluation, FitnessEvaluator, GaConfig, SearchOptions, SearchResult};
pub use mapping_space::{ArchPair, Gene, Heuristic, LayerMapping, MappingError, SearchSpace};
pub use proxy_tasks::{CorpusSpec, FinetuneConfig, ProxyConfig, ProxyEvaluator, TaskSizes};
pub use tinyformer::{Encoder, TransformerConfig};
