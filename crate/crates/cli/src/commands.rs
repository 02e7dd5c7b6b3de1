//! Subcommand implementations. `main.rs` only parses flags and maps errors
//! to exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use elm_core::distillation::{distill, save_outcome, DistillManifest};
use elm_core::evolution::{run_search_with, write_atomic, EvalRequest, FitnessEvaluator, SearchEvent};
use elm_core::mapping_space::{decode, encode, enumerate_space, is_valid, ArchPair, Gene, Heuristic, LayerMapping, SearchSpace, DEFAULT_ENUMERATION_CAP};
use elm_core::oracle::{count_space_direct, exhaustive_search, PlantedEvaluator};
use elm_core::proxy_tasks::{build_tasks, finetune_and_score, generate_corpus};
use elm_core::rng::{derive_seed, label_seed};
use elm_core::mapping_space::heuristic_mapping;
use elm_core::{Encoder, ProxyConfig, ProxyEvaluator, SearchOptions};

use crate::artifacts::{cache_dir, loss_curve_csv, prepare_teacher, DiskCache};
use crate::config::RunConfig;
use crate::report::{full_corpus_csv, write_reports, RunSummary, CHECKPOINT_FILE, FULL_CORPUS_FILE, LOSS_DIR};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

/// Stamp identifying what produced a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub teacher_key: String,
    pub fitness_key: String,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_hash: format!("{:016x}", label_seed(&config.to_toml_string())),
            teacher_key: config.teacher_key(),
            fitness_key: config.fitness_key(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchArgs {
    pub config: PathBuf,
    pub resume: bool,
    pub jobs: usize,
    pub output_dir: Option<PathBuf>,
    pub stop_after: Option<usize>,
}

pub struct SearchOutcome {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub completed: bool,
    /// Pipeline runs performed by this process (cache misses).
    pub evaluations: usize,
}

fn load_config(path: &Path, output_dir: Option<&Path>) -> anyhow::Result<RunConfig> {
    let (mut config, _) = RunConfig::load(path)?;
    if let Some(dir) = output_dir {
        config.output_dir = dir.to_path_buf();
    }
    Ok(config)
}

/// Writes the config copy and manifest; on resume, refuses a directory
/// produced by a different configuration.
fn stamp_run_dir(run_dir: &Path, config: &RunConfig, resume: bool) -> anyhow::Result<()> {
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let manifest = RunManifest::new(config);
    let manifest_path = run_dir.join(MANIFEST_FILE);
    if resume && manifest_path.exists() {
        let previous: RunManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?).context("reading run manifest")?;
        if previous.config_hash != manifest.config_hash {
            bail!("{} was produced by a different configuration; refusing to resume", run_dir.display());
        }
    }
    if !resume {
        for stale in [CHECKPOINT_FILE, FULL_CORPUS_FILE] {
            let p = run_dir.join(stale);
            if p.exists() {
                log::warn!("starting a fresh run: removing {}", p.display());
                std::fs::remove_file(&p)?;
            }
        }
        if run_dir.join(LOSS_DIR).exists() {
            std::fs::remove_dir_all(run_dir.join(LOSS_DIR))?;
        }
    }
    write_atomic(&run_dir.join(CONFIG_COPY), config.to_toml_string().as_bytes())?;
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn cmd_search(args: &SearchArgs) -> anyhow::Result<SearchOutcome> {
    let config = load_config(&args.config, args.output_dir.as_deref())?;
    let run_dir = config.output_dir.clone();
    stamp_run_dir(&run_dir, &config, args.resume)?;
    let cache = cache_dir(&run_dir);
    let corpus = generate_corpus(&config.corpus)?;
    let teacher = prepare_teacher(&config, &corpus, &cache)?;
    let evaluator = ProxyEvaluator::new(&teacher.encoder, config.student.clone(), &corpus, config.proxy.clone())?;
    let cached = DiskCache::new(&evaluator, &cache, &config.fitness_key())?;
    let space = SearchSpace::build(config.arch())?;
    let options = SearchOptions {
        jobs: args.jobs,
        checkpoint: Some(run_dir.join(CHECKPOINT_FILE)),
        resume: args.resume,
        stop_after: args.stop_after,
    };
    let loss_dir = run_dir.join(LOSS_DIR);
    std::fs::create_dir_all(&loss_dir)?;
    let mut io_error: Option<std::io::Error> = None;
    let mut on_event = |event: SearchEvent<'_>| match event {
        SearchEvent::Evaluated { gene, mapping, evaluation } => {
            log::info!("gene {gene} ({mapping}): fitness {:.4}", evaluation.fitness);
            if !evaluation.loss_curve.is_empty() {
                let path = loss_dir.join(format!("{}.csv", gene.key()));
                if let Err(e) = write_atomic(&path, loss_curve_csv(&evaluation.loss_curve).as_bytes()) {
                    io_error.get_or_insert(e);
                }
            }
        }
        SearchEvent::GenerationDone(g) => {
            log::info!(
                "generation {}: max {:.4} min {:.4} avg {:.4} std {:.4} best {}",
                g.index,
                g.stats.max,
                g.stats.min,
                g.stats.avg,
                g.stats.std,
                g.best_gene
            );
        }
    };
    let result = run_search_with(&space, &config.ga, &cached, &options, &mut on_event)?;
    if let Some(e) = io_error {
        return Err(e).context("writing loss curves");
    }
    if result.completed && config.report.full_corpus_top > 0 {
        full_corpus_evaluation(&config, &teacher.encoder, &corpus, &space, &result.cache, &cache, &run_dir)?;
    }
    let (summary, _) = write_reports(&run_dir)?;
    Ok(SearchOutcome { run_dir, summary, completed: result.completed, evaluations: result.evaluations })
}

/// Re-evaluates the best proxy genes with the whole corpus and writes
/// `full_corpus.csv`.
fn full_corpus_evaluation(
    config: &RunConfig,
    teacher: &Encoder,
    corpus: &elm_core::proxy_tasks::SyntheticCorpus,
    space: &SearchSpace,
    proxy_cache: &elm_core::evolution::FitnessCache,
    cache: &Path,
    run_dir: &Path,
) -> anyhow::Result<()> {
    let mut ranked: Vec<(&Gene, f64)> = proxy_cache.iter().map(|(g, e)| (g, e.fitness)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.bits().cmp(b.0.bits())));
    ranked.truncate(config.report.full_corpus_top);
    let full = RunConfig { proxy: ProxyConfig { rho: 1.0, ..config.proxy.clone() }, ..config.clone() };
    let evaluator = ProxyEvaluator::new(teacher, full.student.clone(), corpus, full.proxy.clone())?;
    let cached = DiskCache::new(&evaluator, cache, &full.fitness_key())?;
    let mut rows = Vec::with_capacity(ranked.len());
    for (i, (gene, _)) in ranked.into_iter().enumerate() {
        let mapping = decode(gene, space)?;
        let request = EvalRequest { gene, mapping: &mapping, generation: 0, index: i, stream_seed: derive_seed(config.seed, &[u64::MAX, i as u64]) };
        let e = cached.evaluate(&request).map_err(|e| anyhow::anyhow!("full-corpus evaluation of {gene}: {}", e.0))?;
        log::info!("full corpus: gene {gene} ({mapping}) fitness {:.4}", e.fitness);
        rows.push((gene.clone(), mapping.to_string(), e.fitness));
    }
    write_atomic(&run_dir.join(FULL_CORPUS_FILE), full_corpus_csv(&rows).as_bytes())?;
    Ok(())
}

/// Counts (and optionally lists) the search space. With `list` the
/// mappings go to `out` and the count to `err`.
pub fn cmd_enumerate(teacher_layers: usize, student_layers: usize, list: bool, cap: Option<u64>, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<u64> {
    let space = SearchSpace::build(ArchPair::new(teacher_layers, student_layers)?)?;
    let cap = cap.unwrap_or(DEFAULT_ENUMERATION_CAP);
    let mut count = 0u64;
    for mapping in enumerate_space(&space, cap) {
        let mapping = mapping?;
        count += 1;
        if list {
            writeln!(out, "{mapping}")?;
        }
    }
    if list {
        writeln!(err, "{count}")?;
    } else {
        writeln!(out, "{count}")?;
    }
    Ok(count)
}

#[derive(Debug, Clone, Default)]
pub struct DistillArgs {
    pub config: PathBuf,
    pub mapping: Option<String>,
    pub heuristic: Option<Heuristic>,
    /// Fraction of the corpus to distill on.
    pub rho: f64,
    pub out_dir: Option<PathBuf>,
}

/// Parses and validates a mapping for `space`.
pub fn parse_mapping(text: &str, space: &SearchSpace) -> anyhow::Result<LayerMapping> {
    let mapping: LayerMapping = text.parse()?;
    mapping.validate(space)?;
    Ok(mapping)
}

/// Sequences used to score teacher layers for the contribution heuristic.
const CONTRIBUTION_SEQUENCES: usize = 256;

pub fn heuristic_for_teacher(h: Heuristic, teacher: &Encoder, student_layers: usize, sequences: &[Vec<u32>]) -> anyhow::Result<LayerMapping> {
    let arch = ArchPair::new(teacher.config().layers, student_layers)?;
    let scores = match h {
        Heuristic::Contribution => Some(teacher.layer_contribution(&sequences[..sequences.len().min(CONTRIBUTION_SEQUENCES)])?),
        _ => None,
    };
    Ok(heuristic_mapping(h, arch, scores.as_deref())?)
}

pub struct DistillReport {
    pub manifest: DistillManifest,
    pub manifest_path: PathBuf,
    pub snapshot_path: PathBuf,
    pub loss_path: PathBuf,
}

pub fn cmd_distill(args: &DistillArgs) -> anyhow::Result<DistillReport> {
    let config = load_config(&args.config, None)?;
    let space = SearchSpace::build(config.arch())?;
    // a bad mapping string should fail before any training
    let explicit = match (&args.mapping, args.heuristic) {
        (Some(text), None) => Some(parse_mapping(text, &space)?),
        (None, Some(_)) => None,
        _ => bail!("give exactly one of --mapping and --heuristic"),
    };
    let corpus = generate_corpus(&config.corpus)?;
    let cache = cache_dir(&config.output_dir);
    let teacher = prepare_teacher(&config, &corpus, &cache)?;
    let mapping = match (explicit, args.heuristic) {
        (Some(m), _) => m,
        (None, Some(h)) => {
            let m = heuristic_for_teacher(h, &teacher.encoder, config.student.layers, &corpus.sequences)?;
            if !m.is_valid(&space) {
                log::warn!("{h:?} mapping ({m}) lies outside the search space");
            }
            m
        }
        (None, None) => unreachable!("checked above"),
    };
    log::info!("distilling with mapping ({mapping}) on {:.0}% of the corpus", args.rho * 100.0);
    let subset = corpus.subsample(args.rho, config.proxy.seed)?;
    let outcome = distill(&teacher.encoder, config.student.clone(), &mapping, &subset, &config.proxy.distill)?;
    let suite = build_tasks(&corpus, &config.proxy.tasks)?;
    let scores = finetune_and_score(&outcome.student, &suite, &config.proxy.finetune)?;
    let dir = args.out_dir.clone().unwrap_or_else(|| config.output_dir.join("distill"));
    let stem = mapping.to_string().replace(',', "-");
    let mut manifest = DistillManifest::new(&config.teacher, &outcome, &mapping, &config.proxy.distill, &format!("{stem}.bin"));
    manifest.task_scores = scores.as_map();
    manifest.fitness = Some(scores.fitness);
    save_outcome(&dir, &stem, &outcome, &manifest)?;
    let loss_path = dir.join(format!("{stem}_loss.csv"));
    write_atomic(&loss_path, loss_curve_csv(&outcome.losses).as_bytes())?;
    Ok(DistillReport {
        manifest,
        manifest_path: dir.join(format!("{stem}.json")),
        snapshot_path: dir.join(format!("{stem}.bin")),
        loss_path,
    })
}

pub fn cmd_report(run_dir: &Path, out: &mut dyn Write) -> anyhow::Result<RunSummary> {
    let (summary, files) = write_reports(run_dir)?;
    writeln!(out, "{}", files.stats.display())?;
    writeln!(out, "{}", files.genes.display())?;
    writeln!(out, "{}", files.best.display())?;
    writeln!(out, "{}", files.report.display())?;
    if let Some(rank) = &files.rank {
        writeln!(out, "{}", rank.display())?;
    }
    writeln!(out, "{} loss curves in {}", files.loss_curves, run_dir.join(LOSS_DIR).display())?;
    Ok(summary)
}

/// Published search-space sizes and gene decodings, checked against the
/// enumerator, the independent counter and the codec.
pub fn cmd_verify(out: &mut dyn Write) -> anyhow::Result<bool> {
    let mut all = true;
    let mut check = |out: &mut dyn Write, name: &str, ok: bool, detail: String| -> std::io::Result<()> {
        all &= ok;
        writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" })
    };
    for (m, n, expected) in [(4, 12, 1048u64), (6, 12, 9375), (4, 24, 13892), (6, 24, 380321)] {
        let arch = ArchPair::new(n, m)?;
        let direct = count_space_direct(arch, u64::MAX)?;
        let enumerated = enumerate_space(&SearchSpace::build(arch)?, u64::MAX).count() as u64;
        check(out, &format!("space size M={m} N={n}"), direct == expected && enumerated == expected, format!("direct {direct}, enumerated {enumerated}, expected {expected}"))?;
    }
    for (n, gene, expected) in [
        (12, "000-000-010-101", "0,0,5,10"),
        (12, "000-100-000-000-000-101", "0,5,0,0,0,10"),
        (12, "000-000-011-101", "0,0,6,10"),
        (12, "000-000-100-101", "0,0,7,10"),
        (12, "000-000-011-000-000-101", "0,0,5,0,0,10"),
    ] {
        let gene: Gene = gene.parse()?;
        let space = SearchSpace::build(ArchPair::new(n, gene.len() / gene.group_width())?)?;
        let decoded = decode(&gene, &space)?;
        let ok = decoded.to_string() == expected && is_valid(&gene, &space)?;
        check(out, &format!("decode {gene}"), ok, format!("({decoded}), expected ({expected})"))?;
    }
    let space = SearchSpace::build(ArchPair::new(12, 4)?)?;
    let mut round_trips = 0;
    let mut total = 0;
    for mapping in enumerate_space(&space, u64::MAX) {
        let mapping = mapping?;
        total += 1;
        round_trips += (decode(&encode(&mapping, &space)?, &space)? == mapping) as usize;
    }
    check(out, "codec round trip M=4 N=12", round_trips == total, format!("{round_trips}/{total}"))?;
    let planted = LayerMapping::from_zero_none(&[0, 0, 5, 10]);
    let evaluator = PlantedEvaluator::new(planted.clone());
    let best = exhaustive_search(&space, &evaluator, u64::MAX)?;
    let ties = enumerate_space(&space, u64::MAX).filter_map(Result::ok).filter(|m| evaluator.score(m) == best.best_fitness).count();
    check(out, "planted optimum is the unique maximiser", best.best_mapping == planted && ties == 1, format!("({}) fitness {} with {ties} maximiser(s)", best.best_mapping, best.best_fitness))?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_routes_count_and_list() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(cmd_enumerate(12, 6, false, None, &mut out, &mut err).unwrap(), 9375);
        assert_eq!(String::from_utf8(out).unwrap(), "9375\n");
        let (mut out, mut err) = (Vec::new(), Vec::new());
        cmd_enumerate(12, 4, true, None, &mut out, &mut err).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1048);
        assert!(text.lines().any(|l| l == "0,0,5,10"));
        assert_eq!(String::from_utf8(err).unwrap(), "1048\n");
        assert!(cmd_enumerate(2, 3, false, None, &mut Vec::new(), &mut Vec::new()).is_err());
        assert!(cmd_enumerate(24, 6, false, Some(10), &mut Vec::new(), &mut Vec::new()).is_err());
    }

    #[test]
    fn mapping_errors_are_position_precise() {
        let space = SearchSpace::build(ArchPair::new(12, 4).unwrap()).unwrap();
        let err = parse_mapping("5,3,0,10", &space).unwrap_err().to_string();
        assert!(err.contains("position 2: 3 < previous non-None 5"), "{err}");
        let err = parse_mapping("0,x,0,10", &space).unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
        assert_eq!(parse_mapping("0,0,5,10", &space).unwrap(), LayerMapping::from_zero_none(&[0, 0, 5, 10]));
    }

    #[test]
    fn verify_passes() {
        let mut out = Vec::new();
        assert!(cmd_verify(&mut out).unwrap());
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 11, "{text}");
    }
}
