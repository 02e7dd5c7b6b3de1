use proptest::prelude::*;
use rand::SeedableRng;

use elm_core::evolution::{crossover, mutate, roulette_probabilities};
use elm_core::mapping_space::{decode, encode, enumerate_space, is_valid, ArchPair, Gene, LayerMapping, SearchSpace};
use elm_core::oracle::count_space_direct;
use elm_core::rng::Rng;
use elm_core::stats::spearman;

/// (teacher layers, student layers) with M <= N.
fn arch() -> impl Strategy<Value = ArchPair> {
    (1usize..=16).prop_flat_map(|n| (Just(n), 1usize..=n.min(6))).prop_map(|(n, m)| ArchPair::new(n, m).unwrap())
}

/// A valid mapping built by drawing each entry inside its interval.
fn valid_mapping(space: &SearchSpace, picks: &[u32]) -> Option<LayerMapping> {
    let mut prev = 0i64;
    let mut entries = Vec::new();
    for (m, r) in space.positions.iter().enumerate() {
        let last = m + 1 == space.positions.len();
        let lo = r.lo.max(prev + 1);
        if lo > r.hi {
            if last {
                return None;
            }
            entries.push(None);
            continue;
        }
        let span = (r.hi - lo + 1) as u32 + u32::from(!last);
        let pick = picks[m % picks.len()] % span;
        if !last && pick == 0 {
            entries.push(None);
        } else {
            let v = lo + (pick - u32::from(!last)) as i64;
            entries.push(Some(v));
            prev = v;
        }
    }
    Some(LayerMapping::new(entries))
}

proptest! {
    #[test]
    fn codec_round_trips_valid_mappings(arch in arch(), picks in prop::collection::vec(any::<u32>(), 1..8)) {
        let space = SearchSpace::build(arch).unwrap();
        if let Some(mapping) = valid_mapping(&space, &picks) {
            prop_assert!(mapping.is_valid(&space), "{mapping} should be valid");
            let gene = encode(&mapping, &space).unwrap();
            prop_assert_eq!(gene.len(), space.gene_len());
            prop_assert_eq!(decode(&gene, &space).unwrap(), mapping);
            prop_assert!(is_valid(&gene, &space).unwrap());
        }
    }

    #[test]
    fn decode_then_encode_is_identity_on_valid_genes(arch in arch(), seed in any::<u64>()) {
        let space = SearchSpace::build(arch).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let gene = elm_core::evolution::draw_bernoulli_gene(&space, &mut rng);
        let mapping = decode(&gene, &space).unwrap();
        if mapping.is_valid(&space) {
            prop_assert_eq!(encode(&mapping, &space).unwrap(), gene);
        }
    }

    #[test]
    fn valid_mappings_never_cross(arch in arch()) {
        let space = SearchSpace::build(arch).unwrap();
        let mut n = 0u64;
        for m in enumerate_space(&space, 1_000_000) {
            let m = m.unwrap();
            n += 1;
            let values: Vec<i64> = m.entries().iter().flatten().copied().collect();
            prop_assert!(values.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.entries().last().unwrap().is_some());
        }
        prop_assert_eq!(n, count_space_direct(arch, u64::MAX).unwrap());
    }

    #[test]
    fn operators_preserve_validity(seed in any::<u64>(), rate in 0.0f64..1.0) {
        let space = SearchSpace::build(ArchPair::new(12, 4).unwrap()).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let parents: Vec<Gene> = enumerate_space(&space, u64::MAX)
            .step_by(97)
            .map(|m| encode(&m.unwrap(), &space).unwrap())
            .collect();
        let (a, b) = (&parents[seed as usize % parents.len()], &parents[(seed / 7) as usize % parents.len()]);
        let (c1, c2) = crossover(a, b, &space, rate, &mut rng);
        let child = mutate(&c1, &space, rate, 32, &mut rng);
        for g in [&c1, &c2, &child] {
            prop_assert!(is_valid(g, &space).unwrap(), "{g}");
        }
    }

    #[test]
    fn roulette_probabilities_form_a_distribution(values in prop::collection::vec(-10.0f64..10.0, 1..12)) {
        let p = roulette_probabilities(&values);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let distinct = values.iter().any(|&v| v != min);
        for (v, q) in values.iter().zip(&p) {
            if distinct && *v == min {
                prop_assert_eq!(*q, 0.0);
            }
        }
    }

    #[test]
    fn spearman_is_bounded_and_rank_invariant(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..20)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some(r) = spearman(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            // a strictly increasing transform leaves ranks unchanged
            let squashed: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0).collect();
            prop_assert!((spearman(&squashed, &b).unwrap() - r).abs() < 1e-12);
        }
    }
}
