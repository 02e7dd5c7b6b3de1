//! Brute-force references used to check the search machinery.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;

use crate::evolution::{draw_bernoulli_gene, EvalError, EvalRequest, Evaluation, FitnessEvaluator};
use crate::mapping_space::{decode, encode, enumerate_space, ArchPair, Gene, LayerMapping, MappingError, SearchSpace};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("evaluation failed: {0}")]
    Evaluation(#[from] EvalError),
    #[error("search space holds more than {cap} mappings")]
    CapExceeded { cap: u64 },
}

/// Counts valid mappings by recursion over the admissible intervals,
/// computed here from the interval formula directly and without touching
/// the gene codec.
pub fn count_space_direct(arch: ArchPair, cap: u64) -> Result<u64, OracleError> {
    let ArchPair { teacher_layers: n, student_layers: m } = ArchPair::new(arch.teacher_layers, arch.student_layers)?;
    let (n, m) = (n as i64, m as i64);
    let mut k = 0u32;
    while (1i64 << k) * m <= 2 * n {
        k += 1;
    }
    let width = 1i64 << k;
    // (lo, hi, none allowed) per position
    let intervals: Vec<(i64, i64, bool)> = (1..=m)
        .map(|pos| {
            if pos < m {
                let z = (pos - 1) * n / (2 * m);
                (z + 1, (z + width - 1).min(n), true)
            } else {
                ((n - width + 1).max(1), n, false)
            }
        })
        .collect();

    fn count(pos: usize, prev: i64, intervals: &[(i64, i64, bool)], memo: &mut HashMap<(usize, i64), u64>) -> u64 {
        if pos == intervals.len() {
            return 1;
        }
        if let Some(&c) = memo.get(&(pos, prev)) {
            return c;
        }
        let (lo, hi, none) = intervals[pos];
        let mut total = if none { count(pos + 1, prev, intervals, memo) } else { 0 };
        for v in lo.max(prev + 1)..=hi {
            total += count(pos + 1, v, intervals, memo);
        }
        memo.insert((pos, prev), total);
        total
    }

    let total = count(0, 0, &intervals, &mut HashMap::new());
    if total > cap {
        return Err(OracleError::CapExceeded { cap });
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub best_mapping: LayerMapping,
    pub best_fitness: f64,
    pub evaluated_count: u64,
}

/// Evaluates every valid mapping. Ties keep the lexicographically smallest
/// gene, matching the GA's rule.
pub fn exhaustive_search(
    space: &SearchSpace,
    evaluator: &dyn FitnessEvaluator,
    cap: u64,
) -> Result<ExhaustiveResult, OracleError> {
    let mut best: Option<(LayerMapping, f64)> = None;
    let mut evaluated = 0u64;
    for (i, mapping) in enumerate_space(space, cap).enumerate() {
        let mapping = mapping.map_err(|_| OracleError::CapExceeded { cap })?;
        let gene = encode(&mapping, space)?;
        let request = EvalRequest {
            gene: &gene,
            mapping: &mapping,
            generation: 0,
            index: i,
            stream_seed: derive_seed(0, &[0, i as u64]),
        };
        let fitness = evaluator.evaluate(&request)?.fitness;
        evaluated += 1;
        if best.as_ref().is_none_or(|(_, f)| fitness > *f) {
            best = Some((mapping, fitness));
        }
    }
    let (best_mapping, best_fitness) = best.expect("every space holds at least one mapping");
    Ok(ExhaustiveResult { best_mapping, best_fitness, evaluated_count: evaluated })
}

/// Synthetic fitness with a known unique maximiser: one minus the fraction
/// of positions where the mapping differs from `target`.
#[derive(Debug, Clone)]
pub struct PlantedEvaluator {
    pub target: LayerMapping,
}

impl PlantedEvaluator {
    pub fn new(target: LayerMapping) -> Self {
        Self { target }
    }

    pub fn score(&self, mapping: &LayerMapping) -> f64 {
        let differing = mapping.entries().iter().zip(self.target.entries()).filter(|(a, b)| a != b).count();
        1.0 - differing as f64 / self.target.len() as f64
    }
}

impl FitnessEvaluator for PlantedEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<Evaluation, EvalError> {
        Ok(Evaluation::from_fitness(self.score(request.mapping)))
    }
}

#[derive(Debug, Clone)]
pub struct RandomSearchResult {
    pub best_mapping: LayerMapping,
    pub best_fitness: f64,
    pub evaluated_count: usize,
}

/// Baseline: evaluate `budget` distinct valid genes drawn the same way the
/// GA draws its first generation, keep the best.
pub fn random_search(
    space: &SearchSpace,
    evaluator: &dyn FitnessEvaluator,
    budget: usize,
    seed: u64,
) -> Result<RandomSearchResult, OracleError> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut seen: BTreeSet<Gene> = BTreeSet::new();
    let mut best: Option<(Gene, LayerMapping, f64)> = None;
    let total = count_space_direct(space.arch, u64::MAX)? as usize;
    while seen.len() < budget.min(total) {
        let gene = draw_bernoulli_gene(space, &mut rng);
        let mapping = decode(&gene, space)?;
        if !mapping.is_valid(space) || !seen.insert(gene.clone()) {
            continue;
        }
        let request = EvalRequest {
            gene: &gene,
            mapping: &mapping,
            generation: 0,
            index: seen.len() - 1,
            stream_seed: derive_seed(seed, &[0, seen.len() as u64 - 1]),
        };
        let fitness = evaluator.evaluate(&request)?.fitness;
        let better = match &best {
            None => true,
            Some((g, _, f)) => fitness > *f || (fitness == *f && gene.bits() < g.bits()),
        };
        if better {
            best = Some((gene, mapping, fitness));
        }
    }
    let (_, best_mapping, best_fitness) = best.expect("budget must be positive");
    Ok(RandomSearchResult { best_mapping, best_fitness, evaluated_count: seen.len() })
}
