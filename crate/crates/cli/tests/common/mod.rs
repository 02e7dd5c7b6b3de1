#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// A seconds-scale configuration: 8-layer teacher, 4-layer student,
/// a few hundred sequences and very short training budgets.
pub fn tiny_config(output_dir: &Path, teacher_layers: usize, seed: u64) -> String {
    format!(
        r#"seed = {seed}
output_dir = "{}"

[teacher]
layers = {teacher_layers}
hidden_size = 16
ffn_size = 32
heads = 2
vocab_size = 64
max_seq_len = 16
seed = 1

[student]
layers = 4
hidden_size = 8
ffn_size = 16
heads = 2
vocab_size = 64
max_seq_len = 16
seed = 2

[corpus]
num_sequences = 300

[pretrain]
steps = 40
batch_size = 8

[ga]
generations = 5
population_size = 6

[proxy]
rho = 0.5

[proxy.tasks]
train = 32
dev = 32

[proxy.distill]
steps = 15
batch_size = 4

[proxy.finetune]
steps = 10
batch_size = 4
"#,
        output_dir.display()
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}
