//! Genetic search over layer-mapping genes.
//!
//! The loop follows the classic generational scheme: a Bernoulli(0.5)
//! initial population, fitness-proportionate ("roulette") selection with
//! weights `V - min(V)`, per-position crossover and per-bit mutation. There
//! is no elitism. Fitness values are cached by gene bits, so a gene that
//! survives into later generations is evaluated once.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping_space::{decode, Gene, LayerMapping, MappingError, SearchSpace};
use crate::rng::{derive_seed, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid GA configuration: {0}")]
    Config(String),
    #[error("population initialization gave up after {0} consecutive invalid draws")]
    InitExhausted(usize),
    #[error("gene {0} has not been evaluated")]
    Unevaluated(String),
    #[error("gene {0} already has a fitness value")]
    AlreadyEvaluated(String),
    #[error("evaluation of gene {gene} failed: {source}")]
    Evaluation { gene: String, source: EvalError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error returned by a [`FitnessEvaluator`]. Aborts the search.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct EvalError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    pub generations: usize,
    pub population_size: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub bitflip_rate: f64,
    pub exchange_rate: f64,
    pub seed: u64,
    pub max_repair_attempts: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            generations: 5,
            population_size: 12,
            mutation_prob: 0.8,
            crossover_prob: 0.2,
            bitflip_rate: 0.05,
            exchange_rate: 0.2,
            seed: 0,
            max_repair_attempts: 32,
        }
    }
}

impl GaConfig {
    /// Defaults with the population size used for a student of `m` layers
    /// (12 genes up to four layers, 20 beyond).
    pub fn for_student_layers(m: usize) -> Self {
        Self { population_size: if m <= 4 { 12 } else { 20 }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        let mut problems = Vec::new();
        if self.generations == 0 {
            problems.push("generations must be >= 1".to_string());
        }
        if self.population_size < 2 {
            problems.push("population_size must be >= 2".to_string());
        }
        if self.max_repair_attempts == 0 {
            problems.push("max_repair_attempts must be >= 1".to_string());
        }
        for (name, p) in [
            ("mutation_prob", self.mutation_prob),
            ("crossover_prob", self.crossover_prob),
            ("bitflip_rate", self.bitflip_rate),
            ("exchange_rate", self.exchange_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EvolutionError::Config(problems.join("; ")))
        }
    }
}

/// Outcome of evaluating one gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    #[serde(default)]
    pub task_scores: BTreeMap<String, f64>,
    /// Set when the pipeline failed softly (e.g. divergence) and the fitness
    /// was recorded as the failure value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Distillation loss per step. Not persisted in checkpoints.
    #[serde(skip)]
    pub loss_curve: Vec<f64>,
}

impl Evaluation {
    pub fn from_fitness(fitness: f64) -> Self {
        Self { fitness, task_scores: BTreeMap::new(), failure: None, loss_curve: Vec::new() }
    }
}

pub struct EvalRequest<'a> {
    pub gene: &'a Gene,
    pub mapping: &'a LayerMapping,
    pub generation: usize,
    pub index: usize,
    /// Seed of the stream reserved for this call, derived from
    /// `(GA seed, generation, index)`.
    pub stream_seed: u64,
}

pub trait FitnessEvaluator: Sync {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<Evaluation, EvalError>;
}

impl<F> FitnessEvaluator for F
where
    F: Fn(&EvalRequest<'_>) -> Result<Evaluation, EvalError> + Sync,
{
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<Evaluation, EvalError> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGene {
    gene: Gene,
    evaluation: Option<Evaluation>,
}

impl ScoredGene {
    pub fn pending(gene: Gene) -> Self {
        Self { gene, evaluation: None }
    }

    pub fn evaluated(gene: Gene, evaluation: Evaluation) -> Self {
        Self { gene, evaluation: Some(evaluation) }
    }

    pub fn assign(&mut self, evaluation: Evaluation) -> Result<(), EvolutionError> {
        if self.evaluation.is_some() {
            return Err(EvolutionError::AlreadyEvaluated(self.gene.to_string()));
        }
        self.evaluation = Some(evaluation);
        Ok(())
    }

    pub fn gene(&self) -> &Gene {
        &self.gene
    }

    pub fn fitness(&self) -> Option<f64> {
        self.evaluation.as_ref().map(|e| e.fitness)
    }

    pub fn evaluation(&self) -> Option<&Evaluation> {
        self.evaluation.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub max: f64,
    pub min: f64,
    pub avg: f64,
    /// Population standard deviation (divides by the population size).
    pub std: f64,
}

impl GenerationStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let avg = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / n;
        // the mean can round a hair outside [min, max] for constant inputs
        Self { max, min, avg: avg.clamp(min, max), std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub index: usize,
    pub members: Vec<ScoredGene>,
    pub stats: GenerationStats,
    pub best_gene: Gene,
}

impl Generation {
    pub fn from_members(index: usize, members: Vec<ScoredGene>) -> Result<Self, EvolutionError> {
        let values = fitness_values(&members)?;
        let stats = GenerationStats::from_values(&values);
        let best_gene = best_member(&members)?.gene.clone();
        Ok(Self { index, members, stats, best_gene })
    }

    pub fn best(&self) -> &ScoredGene {
        best_member(&self.members).expect("generation members are evaluated")
    }
}

fn fitness_values(members: &[ScoredGene]) -> Result<Vec<f64>, EvolutionError> {
    if members.is_empty() {
        return Err(EvolutionError::Config("empty generation".into()));
    }
    members
        .iter()
        .map(|m| m.fitness().ok_or_else(|| EvolutionError::Unevaluated(m.gene.to_string())))
        .collect()
}

/// Highest fitness; ties go to the lexicographically smallest bit string.
fn best_member(members: &[ScoredGene]) -> Result<&ScoredGene, EvolutionError> {
    fitness_values(members)?;
    Ok(members
        .iter()
        .reduce(|best, m| {
            let (fb, fm) = (best.fitness().unwrap(), m.fitness().unwrap());
            if fm > fb || (fm == fb && m.gene.bits() < best.gene.bits()) {
                m
            } else {
                best
            }
        })
        .unwrap())
}

/// Draws one gene with every bit from Bernoulli(0.5).
pub fn draw_bernoulli_gene(space: &SearchSpace, rng: &mut Rng) -> Gene {
    let bits = (0..space.gene_len()).map(|_| rng.random_bool(0.5)).collect();
    Gene::from_bits(bits, space.bits_per_position)
}

pub fn init_population(space: &SearchSpace, config: &GaConfig, rng: &mut Rng) -> Result<Vec<Gene>, EvolutionError> {
    init_population_traced(space, config, rng, |_| {})
}

/// [`init_population`] that reports every raw draw, accepted or not.
pub fn init_population_traced(
    space: &SearchSpace,
    config: &GaConfig,
    rng: &mut Rng,
    mut on_draw: impl FnMut(&Gene),
) -> Result<Vec<Gene>, EvolutionError> {
    config.validate()?;
    let limit = config.max_repair_attempts * config.population_size;
    let mut population = Vec::with_capacity(config.population_size);
    let mut rejected = 0;
    while population.len() < config.population_size {
        let gene = draw_bernoulli_gene(space, rng);
        on_draw(&gene);
        if decode(&gene, space)?.is_valid(space) {
            population.push(gene);
            rejected = 0;
        } else {
            rejected += 1;
            if rejected >= limit {
                return Err(EvolutionError::InitExhausted(rejected));
            }
        }
    }
    Ok(population)
}

/// Selection probabilities proportional to `V - min(V)`; uniform when all
/// values are equal.
pub fn roulette_probabilities(fitness: &[f64]) -> Vec<f64> {
    let min = fitness.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = fitness.iter().map(|v| v - min).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / fitness.len() as f64; fitness.len()]
    }
}

pub fn roulette_draw(probabilities: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final partial sum
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(probabilities.len() - 1)
}

/// Two independent roulette draws; the same gene may come up twice.
pub fn select_pair(generation: &Generation, rng: &mut Rng) -> Result<(Gene, Gene), EvolutionError> {
    let probs = roulette_probabilities(&fitness_values(&generation.members)?);
    let a = roulette_draw(&probs, rng);
    let b = roulette_draw(&probs, rng);
    Ok((generation.members[a].gene.clone(), generation.members[b].gene.clone()))
}

/// Swaps the k-bit groups of the positions set in `mask`. An offspring that
/// breaks a mapping rule is replaced by its own parent.
pub fn crossover_with_mask(g1: &Gene, g2: &Gene, mask: &[bool], space: &SearchSpace) -> (Gene, Gene) {
    let (mut c1, mut c2) = (g1.clone(), g2.clone());
    for (m, _) in mask.iter().enumerate().filter(|(_, &swap)| swap) {
        let (a, b) = (g1.code(m), g2.code(m));
        c1.set_code(m, b);
        c2.set_code(m, a);
    }
    let repair = |child: Gene, parent: &Gene| {
        if decode(&child, space).is_ok_and(|d| d.is_valid(space)) {
            child
        } else {
            parent.clone()
        }
    };
    (repair(c1, g1), repair(c2, g2))
}

pub fn crossover(g1: &Gene, g2: &Gene, space: &SearchSpace, exchange_rate: f64, rng: &mut Rng) -> (Gene, Gene) {
    let mask: Vec<bool> = (0..space.student_layers()).map(|_| rng.random_bool(exchange_rate)).collect();
    crossover_with_mask(g1, g2, &mask, space)
}

/// Flips each bit with probability `bitflip_rate`. Invalid results are
/// retried with a fresh mask; after `max_attempts` the gene is returned
/// unchanged.
pub fn mutate(g: &Gene, space: &SearchSpace, bitflip_rate: f64, max_attempts: usize, rng: &mut Rng) -> Gene {
    for _ in 0..max_attempts {
        let mut child = g.clone();
        for bit in child.bits_mut() {
            if rng.random_bool(bitflip_rate) {
                *bit = !*bit;
            }
        }
        if decode(&child, space).is_ok_and(|d| d.is_valid(space)) {
            return child;
        }
    }
    g.clone()
}

pub fn next_generation(
    prev: &Generation,
    space: &SearchSpace,
    config: &GaConfig,
    rng: &mut Rng,
) -> Result<Vec<Gene>, EvolutionError> {
    let s = config.population_size;
    let mut genes = Vec::with_capacity(s + 1);
    while genes.len() < s {
        let (mut a, mut b) = select_pair(prev, rng)?;
        if rng.random_bool(config.crossover_prob) {
            (a, b) = crossover(&a, &b, space, config.exchange_rate, rng);
        }
        for g in [&mut a, &mut b] {
            if rng.random_bool(config.mutation_prob) {
                *g = mutate(g, space, config.bitflip_rate, config.max_repair_attempts, rng);
            }
        }
        genes.push(a);
        genes.push(b);
    }
    genes.truncate(s);
    Ok(genes)
}

/// Fitness memo keyed on raw gene bits.
#[derive(Debug, Clone, Default)]
pub struct FitnessCache {
    entries: BTreeMap<String, (Gene, Evaluation)>,
}

impl FitnessCache {
    pub fn get(&self, gene: &Gene) -> Option<&Evaluation> {
        self.entries.get(&gene.key()).map(|(_, e)| e)
    }

    pub fn insert(&mut self, gene: Gene, evaluation: Evaluation) {
        self.entries.entry(gene.key()).or_insert((gene, evaluation));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in bit-string order.
    pub fn iter(&self) -> impl Iterator<Item = (&Gene, &Evaluation)> {
        self.entries.values().map(|(g, e)| (g, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointGeneration {
    pub index: usize,
    pub genes: Vec<Gene>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub gene: Gene,
    pub evaluation: Evaluation,
}

/// Resumable search state, written after every generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub space: SearchSpace,
    pub config: GaConfig,
    /// Completed generations, oldest first.
    pub generations: Vec<CheckpointGeneration>,
    pub cache: Vec<CacheEntry>,
    /// Generator state right before producing the next generation.
    pub rng: Rng,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, EvolutionError> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(EvolutionError::Checkpoint(format!(
                "version mismatch: file has {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        serde_json::from_value(value).map_err(|e| EvolutionError::Checkpoint(e.to_string()))
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), EvolutionError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    /// Upper bound on concurrent evaluations; `0` and `1` both mean serial.
    pub jobs: usize,
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many generations are complete.
    pub stop_after: Option<usize>,
}

pub enum SearchEvent<'a> {
    Evaluated { gene: &'a Gene, mapping: &'a LayerMapping, evaluation: &'a Evaluation },
    GenerationDone(&'a Generation),
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub generations: Vec<Generation>,
    /// Best gene of the last generation reached.
    pub best: ScoredGene,
    /// Evaluator calls made in this session (cache misses).
    pub evaluations: usize,
    pub cache: FitnessCache,
    /// False when `stop_after` ended the run before the last generation.
    pub completed: bool,
}

pub fn run_search(
    space: &SearchSpace,
    config: &GaConfig,
    evaluator: &dyn FitnessEvaluator,
    options: &SearchOptions,
) -> Result<SearchResult, EvolutionError> {
    run_search_with(space, config, evaluator, options, &mut |_| {})
}

pub fn run_search_with(
    space: &SearchSpace,
    config: &GaConfig,
    evaluator: &dyn FitnessEvaluator,
    options: &SearchOptions,
    on_event: &mut dyn FnMut(SearchEvent<'_>),
) -> Result<SearchResult, EvolutionError> {
    config.validate()?;
    let mut rng = Rng::seed_from_u64(config.seed);
    let mut cache = FitnessCache::default();
    let mut generations: Vec<Generation> = Vec::new();

    if let (true, Some(path)) = (options.resume, &options.checkpoint) {
        if path.exists() {
            let ckpt = Checkpoint::load(path)?;
            if &ckpt.space != space || &ckpt.config != config {
                return Err(EvolutionError::Checkpoint("search space or GA config differs from the checkpoint".into()));
            }
            for entry in ckpt.cache {
                cache.insert(entry.gene, entry.evaluation);
            }
            for g in ckpt.generations {
                let members = g
                    .genes
                    .into_iter()
                    .map(|gene| {
                        let eval = cache.get(&gene).cloned().ok_or_else(|| EvolutionError::Unevaluated(gene.to_string()))?;
                        Ok(ScoredGene::evaluated(gene, eval))
                    })
                    .collect::<Result<Vec<_>, EvolutionError>>()?;
                generations.push(Generation::from_members(g.index, members)?);
            }
            rng = ckpt.rng;
        }
    }

    let pool = match options.jobs {
        0 | 1 => None,
        j => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| EvolutionError::Config(e.to_string()))?,
        ),
    };

    let mut evaluations = 0;
    let mut completed = true;
    while generations.len() < config.generations {
        if options.stop_after.is_some_and(|s| generations.len() >= s) {
            completed = false;
            break;
        }
        let index = generations.len() + 1;
        let genes = match generations.last() {
            None => init_population(space, config, &mut rng)?,
            Some(prev) => next_generation(prev, space, config, &mut rng)?,
        };
        let outcome = evaluate_generation(&genes, index, space, config.seed, evaluator, pool.as_ref(), &mut cache, on_event);
        match outcome {
            Ok(n) => evaluations += n,
            Err(e) => {
                // keep whatever finished so a resume does not redo it
                if let Some(path) = &options.checkpoint {
                    let rng_before = replay_rng(config, &generations, space)?;
                    checkpoint_of(space, config, &generations, &cache, rng_before).save(path)?;
                }
                return Err(e);
            }
        }
        let members = genes
            .into_iter()
            .map(|g| {
                let e = cache.get(&g).cloned().expect("evaluated above");
                ScoredGene::evaluated(g, e)
            })
            .collect();
        let generation = Generation::from_members(index, members)?;
        on_event(SearchEvent::GenerationDone(&generation));
        generations.push(generation);
        if let Some(path) = &options.checkpoint {
            checkpoint_of(space, config, &generations, &cache, rng.clone()).save(path)?;
        }
    }

    let best = generations.last().expect("at least one generation").best().clone();
    Ok(SearchResult { generations, best, evaluations, cache, completed })
}

/// Recomputes the generator state after the given completed generations.
/// Only needed on the error path, where `rng` has already advanced past the
/// failed generation.
fn replay_rng(config: &GaConfig, generations: &[Generation], space: &SearchSpace) -> Result<Rng, EvolutionError> {
    let mut rng = Rng::seed_from_u64(config.seed);
    for (i, _) in generations.iter().enumerate() {
        if i == 0 {
            init_population(space, config, &mut rng)?;
        } else {
            next_generation(&generations[i - 1], space, config, &mut rng)?;
        }
    }
    Ok(rng)
}

fn checkpoint_of(
    space: &SearchSpace,
    config: &GaConfig,
    generations: &[Generation],
    cache: &FitnessCache,
    rng: Rng,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        space: space.clone(),
        config: config.clone(),
        generations: generations
            .iter()
            .map(|g| CheckpointGeneration { index: g.index, genes: g.members.iter().map(|m| m.gene.clone()).collect() })
            .collect(),
        cache: cache.iter().map(|(g, e)| CacheEntry { gene: g.clone(), evaluation: e.clone() }).collect(),
        rng,
    }
}

/// Evaluates the uncached genes of one generation, possibly in parallel,
/// and merges the results in gene-index order. Returns the number of
/// evaluator calls.
#[allow(clippy::too_many_arguments)]
fn evaluate_generation(
    genes: &[Gene],
    generation: usize,
    space: &SearchSpace,
    seed: u64,
    evaluator: &dyn FitnessEvaluator,
    pool: Option<&rayon::ThreadPool>,
    cache: &mut FitnessCache,
    on_event: &mut dyn FnMut(SearchEvent<'_>),
) -> Result<usize, EvolutionError> {
    let mut todo: Vec<(usize, &Gene, LayerMapping)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, g) in genes.iter().enumerate() {
        if cache.get(g).is_none() && seen.insert(g.key()) {
            todo.push((i, g, decode(g, space)?));
        }
    }
    let run = |(i, g, mapping): &(usize, &Gene, LayerMapping)| {
        let request = EvalRequest {
            gene: g,
            mapping,
            generation,
            index: *i,
            stream_seed: derive_seed(seed, &[generation as u64, *i as u64]),
        };
        evaluator.evaluate(&request)
    };
    let results: Vec<Result<Evaluation, EvalError>> = match pool {
        Some(pool) => {
            use rayon::prelude::*;
            pool.install(|| todo.par_iter().map(run).collect())
        }
        None => todo.iter().map(run).collect(),
    };
    let calls = todo.len();
    for ((_, gene, mapping), result) in todo.into_iter().zip(results) {
        match result {
            Ok(evaluation) if evaluation.fitness.is_finite() => {
                on_event(SearchEvent::Evaluated { gene, mapping: &mapping, evaluation: &evaluation });
                cache.insert(gene.clone(), evaluation);
            }
            Ok(evaluation) => {
                return Err(EvolutionError::Evaluation {
                    gene: gene.to_string(),
                    source: EvalError(format!("non-finite fitness {}", evaluation.fitness)),
                })
            }
            Err(source) => return Err(EvolutionError::Evaluation { gene: gene.to_string(), source }),
        }
    }
    Ok(calls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping_space::{encode, ArchPair};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn space(m: usize, n: usize) -> SearchSpace {
        SearchSpace::build(ArchPair::new(n, m).unwrap()).unwrap()
    }

    fn gene(s: &str) -> Gene {
        s.parse().unwrap()
    }

    fn generation_with(fitness: &[f64]) -> Generation {
        let s = space(4, 12);
        let genes: Vec<Gene> = crate::mapping_space::enumerate_space(&s, 1000)
            .take(fitness.len())
            .map(|m| encode(&m.unwrap(), &s).unwrap())
            .collect();
        let members = genes
            .into_iter()
            .zip(fitness)
            .map(|(g, &f)| ScoredGene::evaluated(g, Evaluation::from_fitness(f)))
            .collect();
        Generation::from_members(1, members).unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = GaConfig::default();
        assert_eq!((c.mutation_prob, c.bitflip_rate, c.crossover_prob, c.exchange_rate), (0.8, 0.05, 0.2, 0.2));
        assert_eq!(c.generations, 5);
        assert_eq!(GaConfig::for_student_layers(4).population_size, 12);
        assert_eq!(GaConfig::for_student_layers(6).population_size, 20);
        let bad = GaConfig { mutation_prob: 1.5, population_size: 1, ..c };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("mutation_prob") && msg.contains("population_size"), "{msg}");
    }

    #[test]
    fn init_is_valid_and_deterministic() {
        let s = space(4, 12);
        let c = GaConfig { seed: 3, ..GaConfig::default() };
        let a = init_population(&s, &c, &mut Rng::seed_from_u64(3)).unwrap();
        let b = init_population(&s, &c, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert!(a.iter().all(|g| decode(g, &s).unwrap().is_valid(&s)));
    }

    #[test]
    fn init_draws_are_bernoulli_half() {
        let s = space(4, 12);
        let c = GaConfig { population_size: 2000, ..GaConfig::default() };
        let mut ones = vec![0usize; s.gene_len()];
        let mut draws = 0usize;
        init_population_traced(&s, &c, &mut Rng::seed_from_u64(11), |g| {
            draws += 1;
            for (i, &b) in g.bits().iter().enumerate() {
                ones[i] += b as usize;
            }
        })
        .unwrap();
        for (i, &o) in ones.iter().enumerate() {
            let freq = o as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.03, "bit {i}: {freq}");
        }
    }

    #[test]
    fn init_gives_up_on_hopeless_space() {
        // M = N = 1 keeps one code in four valid; a tiny budget must trip
        let s = space(1, 1);
        let c = GaConfig { population_size: 2, max_repair_attempts: 1, ..GaConfig::default() };
        let mut failures = 0;
        for seed in 0..20 {
            if let Err(EvolutionError::InitExhausted(_)) = init_population(&s, &c, &mut Rng::seed_from_u64(seed)) {
                failures += 1;
            }
        }
        assert!(failures > 0);
    }

    #[test]
    fn roulette_probabilities_examples() {
        assert_eq!(roulette_probabilities(&[0.9, 0.5, 0.5]), vec![1.0, 0.0, 0.0]);
        let p = roulette_probabilities(&[0.8, 0.6, 0.2]);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12 && p[2] == 0.0);
        assert_eq!(roulette_probabilities(&[0.7; 3]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn select_pair_never_picks_the_minimum() {
        let g = generation_with(&[0.9, 0.5, 0.5]);
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (a, b) = select_pair(&g, &mut rng).unwrap();
            assert_eq!(a, g.members[0].gene);
            assert_eq!(b, g.members[0].gene);
        }
    }

    #[test]
    fn select_pair_rejects_unevaluated() {
        let mut g = generation_with(&[0.9, 0.5]);
        g.members[1] = ScoredGene::pending(g.members[1].gene.clone());
        assert!(matches!(select_pair(&g, &mut Rng::seed_from_u64(0)), Err(EvolutionError::Unevaluated(_))));
    }

    #[test]
    fn fitness_is_set_once() {
        let mut sg = ScoredGene::pending(gene("000-000-010-101"));
        sg.assign(Evaluation::from_fitness(0.5)).unwrap();
        assert!(sg.assign(Evaluation::from_fitness(0.6)).is_err());
        assert_eq!(sg.fitness(), Some(0.5));
    }

    #[test]
    fn crossover_extremes() {
        let s = space(4, 12);
        let (g1, g2) = (gene("000-000-010-101"), gene("011-101-110-111"));
        let mut rng = Rng::seed_from_u64(0);
        assert_eq!(crossover(&g1, &g2, &s, 1.0, &mut rng), (g2.clone(), g1.clone()));
        assert_eq!(crossover(&g1, &g2, &s, 0.0, &mut rng), (g1.clone(), g2.clone()));
    }

    #[test]
    fn crossover_repairs_by_parent_fallback() {
        let s = space(4, 12);
        let (g1, g2) = (gene("000-000-010-101"), gene("011-101-110-111"));
        let (c1, c2) = crossover_with_mask(&g1, &g2, &[false, false, true, false], &s);
        assert_eq!(decode(&c1, &s).unwrap().to_string(), "0,0,9,10");
        // (3,6,5,12) crosses, so the second child falls back to its parent
        assert_eq!(c2, g2);
    }

    #[test]
    fn mutation_identity_and_single_flip() {
        let s = space(4, 12);
        let g = gene("000-000-010-101");
        assert_eq!(mutate(&g, &s, 0.0, 32, &mut Rng::seed_from_u64(0)), g);
        let mut flipped = g.clone();
        flipped.bits_mut()[8] = true;
        assert_eq!(flipped.to_string(), "000-000-011-101");
        assert_eq!(decode(&flipped, &s).unwrap().to_string(), "0,0,6,10");
    }

    #[test]
    fn mutation_flip_count_matches_rate() {
        let s = space(4, 12);
        let g = gene("000-000-010-101");
        let mut rng = Rng::seed_from_u64(5);
        let n = 100_000;
        let total: usize = (0..n)
            .map(|_| {
                let c = mutate(&g, &s, 0.05, 32, &mut rng);
                c.bits().iter().zip(g.bits()).filter(|(a, b)| a != b).count()
            })
            .sum();
        let mean = total as f64 / n as f64;
        assert!((0.45..=0.75).contains(&mean), "mean flips {mean}");
    }

    #[test]
    fn mutation_always_valid() {
        let s = space(6, 12);
        let g = gene("000-100-000-000-000-101");
        let mut rng = Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let c = mutate(&g, &s, 0.3, 32, &mut rng);
            assert!(decode(&c, &s).unwrap().is_valid(&s));
        }
    }

    #[test]
    fn next_generation_size_and_validity() {
        let s = space(4, 12);
        let c = GaConfig::default();
        let g = generation_with(&[0.1, 0.4, 0.3, 0.9, 0.2, 0.5, 0.6, 0.7, 0.8, 0.35, 0.45, 0.55]);
        let next = next_generation(&g, &s, &c, &mut Rng::seed_from_u64(4)).unwrap();
        assert_eq!(next.len(), 12);
        assert!(next.iter().all(|x| decode(x, &s).unwrap().is_valid(&s)));
        // odd sizes truncate the last pair
        let c = GaConfig { population_size: 5, ..c };
        assert_eq!(next_generation(&g, &s, &c, &mut Rng::seed_from_u64(4)).unwrap().len(), 5);
    }

    #[test]
    fn without_operators_offspring_come_from_parents() {
        let s = space(4, 12);
        let c = GaConfig { mutation_prob: 0.0, crossover_prob: 0.0, ..GaConfig::default() };
        let g = generation_with(&[0.1, 0.4, 0.3, 0.9, 0.2, 0.5, 0.6, 0.7, 0.8, 0.35, 0.45, 0.55]);
        let next = next_generation(&g, &s, &c, &mut Rng::seed_from_u64(4)).unwrap();
        let lowest = &g.members[0].gene;
        assert!(next.iter().all(|x| g.members.iter().any(|m| &m.gene == x)));
        assert!(next.iter().all(|x| x != lowest));
    }

    #[test]
    fn stats_and_best_tie_break() {
        let g = generation_with(&[0.5, 0.9, 0.9, 0.1]);
        assert_eq!(g.stats.max, 0.9);
        assert_eq!(g.stats.min, 0.1);
        assert!((g.stats.avg - 0.6).abs() < 1e-12);
        let expected_std = ((0.01 + 0.09 + 0.09 + 0.25) / 4.0f64).sqrt();
        assert!((g.stats.std - expected_std).abs() < 1e-12);
        assert_eq!(g.best_gene, g.members[1].gene);
        assert!(g.members[1].gene.bits() < g.members[2].gene.bits());
    }

    fn planted(target: &'static str) -> impl Fn(&EvalRequest<'_>) -> Result<Evaluation, EvalError> + Sync {
        move |req: &EvalRequest<'_>| {
            let t: LayerMapping = target.parse().unwrap();
            let same = req.mapping.entries().iter().zip(t.entries()).filter(|(a, b)| a == b).count();
            Ok(Evaluation::from_fitness(same as f64 / t.len() as f64))
        }
    }

    #[test]
    fn single_generation_returns_best_of_initial_population() {
        let s = space(4, 12);
        let c = GaConfig { generations: 1, seed: 2, ..GaConfig::default() };
        let r = run_search(&s, &c, &planted("0,0,5,10"), &SearchOptions::default()).unwrap();
        assert_eq!(r.generations.len(), 1);
        let init = init_population(&s, &c, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r.generations[0].members.iter().map(|m| m.gene().clone()).collect::<Vec<_>>(), init);
        assert_eq!(r.best.fitness(), Some(r.generations[0].stats.max));
    }

    #[test]
    fn cache_prevents_reevaluation() {
        let s = space(4, 12);
        let c = GaConfig { generations: 4, seed: 5, ..GaConfig::default() };
        let calls = AtomicUsize::new(0);
        let inner = planted("0,0,5,10");
        let eval = |req: &EvalRequest<'_>| {
            calls.fetch_add(1, Ordering::SeqCst);
            inner(req)
        };
        let r = run_search(&s, &c, &eval, &SearchOptions::default()).unwrap();
        let unique: std::collections::BTreeSet<String> =
            r.generations.iter().flat_map(|g| g.members.iter().map(|m| m.gene().key())).collect();
        assert_eq!(calls.load(Ordering::SeqCst), unique.len());
        assert_eq!(r.evaluations, unique.len());
        assert!(unique.len() < 4 * 12, "some gene should survive a generation");
    }

    #[test]
    fn evaluator_error_aborts_with_resumable_checkpoint() {
        let s = space(4, 12);
        let c = GaConfig { generations: 3, seed: 8, ..GaConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        let opts = SearchOptions { checkpoint: Some(ckpt.clone()), resume: true, ..Default::default() };
        let inner = planted("0,0,5,10");
        let calls = AtomicUsize::new(0);
        let flaky = |req: &EvalRequest<'_>| {
            if req.generation == 2 && calls.fetch_add(1, Ordering::SeqCst) == 2 {
                return Err(EvalError("boom".into()));
            }
            inner(req)
        };
        let err = run_search(&s, &c, &flaky, &opts).unwrap_err();
        assert!(err.to_string().contains("boom"));
        let saved = Checkpoint::load(&ckpt).unwrap();
        assert_eq!(saved.generations.len(), 1);

        let resumed = run_search(&s, &c, &inner, &opts).unwrap();
        let fresh = run_search(&s, &c, &inner, &SearchOptions::default()).unwrap();
        assert_eq!(resumed.generations, fresh.generations);
    }

    #[test]
    fn checkpoint_version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"version": 99}"#).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("version mismatch"));
    }
}
