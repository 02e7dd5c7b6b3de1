//! On-disk artifacts shared by the subcommands: the trained-teacher cache,
//! the fitness cache and small CSV helpers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use elm_core::distillation::pretrain_teacher;
use elm_core::evolution::{write_atomic, EvalError, EvalRequest, Evaluation, FitnessEvaluator};
use elm_core::proxy_tasks::{Grammar, SyntheticCorpus};
use elm_core::rng::{label_seed, stream};
use elm_core::tinyformer::{read_snapshot, write_snapshot};
use elm_core::Encoder;

use crate::config::RunConfig;

pub const CACHE_ENV: &str = "ELM_CACHE_DIR";
const HELD_OUT_SEQUENCES: usize = 200;

/// `$ELM_CACHE_DIR` when set, `<output_dir>/cache` otherwise.
pub fn cache_dir(output_dir: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => output_dir.join("cache"),
    }
}

/// Formats `x` with six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    // the exponent after rounding to six digits, so 9.9999996 counts as 10
    let sci = format!("{x:.5e}");
    let exponent: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if !(-4..6).contains(&exponent) {
        return sci;
    }
    let decimals = (5 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("Step,Loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, fmt_sig(*l));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TeacherRecord {
    key: String,
    held_out_accuracy: f64,
    final_loss: f64,
}

pub struct Teacher {
    pub encoder: Encoder,
    pub held_out_accuracy: f64,
}

/// Sequences drawn from the corpus grammar on a stream the corpus itself
/// never uses.
pub fn held_out_sequences(corpus: &SyntheticCorpus, n: usize) -> anyhow::Result<Vec<Vec<u32>>> {
    let grammar = Grammar::new(&corpus.spec)?;
    let mut rng = stream(corpus.spec.seed, &[label_seed("held-out")]);
    Ok((0..n).map(|_| grammar.sample(&mut rng)).collect())
}

/// Loads the teacher for `config` from the cache or pretrains and stores
/// it.
pub fn prepare_teacher(config: &RunConfig, corpus: &SyntheticCorpus, cache: &Path) -> anyhow::Result<Teacher> {
    let key = config.teacher_key();
    let dir = cache.join("teacher");
    let (bin, json) = (dir.join(format!("{key}.bin")), dir.join(format!("{key}.json")));
    if bin.exists() && json.exists() {
        let encoder = read_snapshot(&bin).with_context(|| format!("reading teacher {}", bin.display()))?;
        let record: TeacherRecord = serde_json::from_slice(&std::fs::read(&json)?).with_context(|| format!("parsing {}", json.display()))?;
        if encoder.config() == &config.teacher {
            log::info!("loaded teacher {key} (held-out masked accuracy {:.3})", record.held_out_accuracy);
            return Ok(Teacher { encoder, held_out_accuracy: record.held_out_accuracy });
        }
        log::warn!("cached teacher {key} has a different configuration; retraining");
    }
    log::info!("pretraining teacher ({} layers, {} steps)", config.teacher.layers, config.pretrain.steps);
    let trained = pretrain_teacher(config.teacher.clone(), &corpus.sequences, &config.pretrain)?;
    let held_out = held_out_sequences(corpus, HELD_OUT_SEQUENCES)?;
    let accuracy = trained.model.masked_accuracy(&held_out, config.pretrain.mask_prob, config.pretrain.seed)?;
    let chance = 1.0 / config.corpus.vocab_size as f64;
    if accuracy <= 3.0 * chance {
        log::warn!("teacher held-out masked accuracy {accuracy:.3} is close to chance ({chance:.3})");
    } else {
        log::info!("teacher held-out masked accuracy {accuracy:.3}");
    }
    std::fs::create_dir_all(&dir)?;
    write_snapshot(&trained.model.encoder, &bin)?;
    let record = TeacherRecord { key, held_out_accuracy: accuracy, final_loss: trained.losses.last().copied().unwrap_or(f64::NAN) };
    write_atomic(&json, serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(Teacher { encoder: trained.model.encoder, held_out_accuracy: accuracy })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedFitness {
    mapping: String,
    evaluation: Evaluation,
    loss_curve: Vec<f64>,
}

/// Persists evaluations across processes, keyed by the fitness setup and
/// the mapping.
pub struct DiskCache<'a> {
    inner: &'a dyn FitnessEvaluator,
    dir: PathBuf,
    namespace: String,
}

impl<'a> DiskCache<'a> {
    pub fn new(inner: &'a dyn FitnessEvaluator, cache: &Path, namespace: &str) -> std::io::Result<Self> {
        let dir = cache.join("fitness");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir, namespace: namespace.to_string() })
    }

    fn path(&self, mapping: &str) -> PathBuf {
        self.dir.join(format!("{}-{:016x}.json", self.namespace, label_seed(mapping)))
    }
}

impl FitnessEvaluator for DiskCache<'_> {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<Evaluation, EvalError> {
        let mapping = request.mapping.to_string();
        let path = self.path(&mapping);
        if let Ok(bytes) = std::fs::read(&path) {
            match serde_json::from_slice::<CachedFitness>(&bytes) {
                Ok(hit) if hit.mapping == mapping => {
                    return Ok(Evaluation { loss_curve: hit.loss_curve, ..hit.evaluation });
                }
                _ => log::warn!("ignoring unreadable fitness cache entry {}", path.display()),
            }
        }
        let evaluation = self.inner.evaluate(request)?;
        let record = CachedFitness { mapping, evaluation: evaluation.clone(), loss_curve: evaluation.loss_curve.clone() };
        let json = serde_json::to_vec(&record).map_err(|e| EvalError(e.to_string()))?;
        if let Err(e) = write_atomic(&path, &json) {
            log::warn!("cannot write fitness cache entry {}: {e}", path.display());
        }
        Ok(evaluation)
    }
}
