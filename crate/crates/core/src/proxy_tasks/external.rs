//! File-based evaluator protocol for pipelines living outside this
//! process.
//!
//! The engine appends `gene<TAB>mapping<TAB>seed` lines to `pending.tsv`
//! and waits for `gene<TAB>fitness[<TAB>task=score...]` lines in
//! `fitness.tsv`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::evolution::{EvalError, EvalRequest, Evaluation, FitnessEvaluator};

pub const PENDING_FILE: &str = "pending.tsv";
pub const FITNESS_FILE: &str = "fitness.tsv";

pub struct ExternalEvaluator {
    dir: PathBuf,
    poll: Duration,
    timeout: Duration,
    lock: Mutex<()>,
}

impl ExternalEvaluator {
    pub fn new(dir: impl Into<PathBuf>, poll: Duration, timeout: Duration) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, poll, timeout, lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

pub fn format_pending(gene_bits: &str, mapping: &str, seed: u64) -> String {
    format!("{gene_bits}\t{mapping}\t{seed}\n")
}

/// Parses one `fitness.tsv` line into `(gene_bits, evaluation)`.
pub fn parse_fitness_line(line: &str) -> Result<(String, Evaluation), String> {
    let mut fields = line.trim_end_matches(['\r', '\n']).split('\t');
    let gene = fields.next().filter(|g| !g.is_empty()).ok_or("missing gene field")?;
    let fitness: f64 = fields
        .next()
        .ok_or("missing fitness field")?
        .trim()
        .parse()
        .map_err(|e| format!("bad fitness: {e}"))?;
    if !fitness.is_finite() {
        return Err("fitness is not finite".into());
    }
    let mut task_scores = BTreeMap::new();
    for f in fields.filter(|f| !f.is_empty()) {
        let (name, value) = f.split_once('=').ok_or_else(|| format!("task score `{f}` is not name=value"))?;
        task_scores.insert(name.to_string(), value.trim().parse().map_err(|e| format!("bad score for {name}: {e}"))?);
    }
    Ok((gene.to_string(), Evaluation { task_scores, ..Evaluation::from_fitness(fitness) }))
}

pub fn format_fitness_line(gene_bits: &str, evaluation: &Evaluation) -> String {
    let mut line = format!("{gene_bits}\t{:.9}", evaluation.fitness);
    for (k, v) in &evaluation.task_scores {
        line.push_str(&format!("\t{k}={v:.9}"));
    }
    line.push('\n');
    line
}

impl FitnessEvaluator for ExternalEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<Evaluation, EvalError> {
        let bits = request.gene.key();
        {
            let _guard = self.lock.lock().expect("pending lock");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.dir.join(PENDING_FILE))
                .map_err(|e| EvalError(format!("cannot write {PENDING_FILE}: {e}")))?;
            f.write_all(format_pending(&bits, &request.mapping.to_string(), request.stream_seed).as_bytes())
                .map_err(|e| EvalError(e.to_string()))?;
        }
        let start = Instant::now();
        loop {
            if let Ok(text) = std::fs::read_to_string(self.dir.join(FITNESS_FILE)) {
                for line in text.lines() {
                    if line.split('\t').next() == Some(bits.as_str()) {
                        return parse_fitness_line(line).map(|(_, e)| e).map_err(EvalError);
                    }
                }
            }
            if start.elapsed() >= self.timeout {
                return Err(EvalError(format!("no fitness for gene {bits} after {:?}", self.timeout)));
            }
            std::thread::sleep(self.poll);
        }
    }
}
