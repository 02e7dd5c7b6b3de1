//! Fixtures shared by the criterion benches.

use elm_core::distillation::TeacherActivations;
use elm_core::proxy_tasks::{generate_corpus, CorpusSpec};
use elm_core::{Encoder, TransformerConfig};

/// The toy student: 4 layers, width 16.
pub fn student_config() -> TransformerConfig {
    TransformerConfig { layers: 4, hidden_size: 16, ffn_size: 64, heads: 2, vocab_size: 64, max_seq_len: 16, seed: 2 }
}

/// The toy teacher: 8 layers, width 32.
pub fn teacher_config() -> TransformerConfig {
    TransformerConfig { layers: 8, hidden_size: 32, ffn_size: 128, heads: 2, vocab_size: 64, max_seq_len: 16, seed: 1 }
}

pub fn sequences(n: usize) -> Vec<Vec<u32>> {
    generate_corpus(&CorpusSpec { num_sequences: n, ..CorpusSpec::default() }).expect("valid corpus spec").sequences
}

pub fn teacher_targets(n: usize) -> (Encoder, TeacherActivations) {
    let teacher = Encoder::new(teacher_config()).expect("valid teacher");
    let targets = TeacherActivations::compute(&teacher, &sequences(n), &[]).expect("teacher activations");
    (teacher, targets)
}
