//! Run-directory reports. Everything here is a pure function of the
//! checkpoint (plus the optional full-corpus table), so a resumed run and
//! an uninterrupted one produce identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use elm_core::evolution::{write_atomic, Checkpoint, Evaluation, GenerationStats};
use elm_core::mapping_space::{decode, Gene, SearchSpace};
use elm_core::stats::spearman;

use crate::artifacts::{csv_field, fmt_sig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const STATS_FILE: &str = "stats.csv";
pub const GENES_FILE: &str = "genes.csv";
pub const BEST_FILE: &str = "best_gene.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const FULL_CORPUS_FILE: &str = "full_corpus.csv";
pub const RANK_FILE: &str = "rank_table.csv";
pub const LOSS_DIR: &str = "loss_curves";

#[derive(Debug, Clone)]
pub struct GenerationRow {
    pub index: usize,
    pub stats: GenerationStats,
    pub best: Gene,
    pub best_fitness: f64,
}

/// Everything the report files are rendered from.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub space: SearchSpace,
    pub planned_generations: usize,
    pub rows: Vec<GenerationRow>,
    /// Unique evaluated genes in bit-string order.
    pub genes: Vec<(Gene, Evaluation)>,
}

impl RunSummary {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> anyhow::Result<Self> {
        let cache: BTreeMap<String, &Evaluation> = ckpt.cache.iter().map(|e| (e.gene.key(), &e.evaluation)).collect();
        let mut rows = Vec::with_capacity(ckpt.generations.len());
        for g in &ckpt.generations {
            let scored: Vec<(&Gene, f64)> = g
                .genes
                .iter()
                .map(|gene| cache.get(&gene.key()).map(|e| (gene, e.fitness)).with_context(|| format!("gene {gene} has no recorded fitness")))
                .collect::<anyhow::Result<_>>()?;
            if scored.is_empty() {
                bail!("generation {} is empty", g.index);
            }
            let values: Vec<f64> = scored.iter().map(|s| s.1).collect();
            // highest fitness, ties to the smallest bit string
            let &(best, best_fitness) = scored
                .iter()
                .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0.bits() < a.0.bits()) { b } else { a })
                .expect("non-empty");
            rows.push(GenerationRow { index: g.index, stats: GenerationStats::from_values(&values), best: best.clone(), best_fitness });
        }
        let mut genes: Vec<(Gene, Evaluation)> = ckpt.cache.iter().map(|e| (e.gene.clone(), e.evaluation.clone())).collect();
        genes.sort_by(|a, b| a.0.bits().cmp(b.0.bits()));
        Ok(Self { space: ckpt.space.clone(), planned_generations: ckpt.config.generations, rows, genes })
    }

    pub fn completed(&self) -> bool {
        self.rows.len() >= self.planned_generations
    }

    fn mapping_of(&self, gene: &Gene) -> String {
        decode(gene, &self.space).map(|m| m.to_string()).unwrap_or_else(|e| format!("<{e}>"))
    }

    pub fn stats_csv(&self) -> String {
        let mut out = String::from("Gen,Max,Min,Avg,Std,BestGene,BestMapping\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.index,
                fmt_sig(r.stats.max),
                fmt_sig(r.stats.min),
                fmt_sig(r.stats.avg),
                fmt_sig(r.stats.std),
                r.best,
                csv_field(&self.mapping_of(&r.best))
            );
        }
        out
    }

    fn task_names(&self) -> Vec<String> {
        let names: BTreeSet<&String> = self.genes.iter().flat_map(|(_, e)| e.task_scores.keys()).collect();
        names.into_iter().cloned().collect()
    }

    pub fn genes_csv(&self) -> String {
        let tasks = self.task_names();
        let mut out = String::from("Gene,Mapping,Fitness");
        for t in &tasks {
            out.push(',');
            out.push_str(&csv_field(t));
        }
        out.push_str(",Failure\n");
        for (gene, e) in &self.genes {
            let _ = write!(out, "{gene},{},{}", csv_field(&self.mapping_of(gene)), fmt_sig(e.fitness));
            for t in &tasks {
                out.push(',');
                if let Some(v) = e.task_scores.get(t) {
                    out.push_str(&fmt_sig(*v));
                }
            }
            let _ = writeln!(out, ",{}", csv_field(e.failure.as_deref().unwrap_or("")));
        }
        out
    }

    pub fn final_best(&self) -> Option<&GenerationRow> {
        self.rows.last()
    }

    pub fn best_gene_txt(&self) -> String {
        match self.final_best() {
            Some(r) => format!("{}\n{}\n{}\n", r.best, self.mapping_of(&r.best), fmt_sig(r.best_fitness)),
            None => String::new(),
        }
    }

    pub fn report_txt(&self, rank: Option<&RankTable>) -> String {
        let mut out = String::new();
        let arch = self.space.arch;
        let _ = writeln!(out, "layer-mapping search: teacher {} layers, student {} layers", arch.teacher_layers, arch.student_layers);
        let status = if self.completed() { "complete" } else { "incomplete" };
        let _ = writeln!(out, "generations: {} of {} ({status})", self.rows.len(), self.planned_generations);
        let _ = writeln!(out, "unique genes evaluated: {}", self.genes.len());
        if let Some(r) = self.final_best() {
            let _ = writeln!(out, "best gene of the last generation: {} -> ({}) fitness {}", r.best, self.mapping_of(&r.best), fmt_sig(r.best_fitness));
        }
        if let Some((gene, e)) = self
            .genes
            .iter()
            .reduce(|a, b| if b.1.fitness > a.1.fitness { b } else { a })
        {
            let _ = writeln!(out, "best gene seen: {gene} -> ({}) fitness {}", self.mapping_of(gene), fmt_sig(e.fitness));
        }
        let failures = self.genes.iter().filter(|(_, e)| e.failure.is_some()).count();
        if failures > 0 {
            let _ = writeln!(out, "genes with a failed pipeline: {failures}");
        }
        out.push('\n');
        let _ = writeln!(out, "{:>4} {:>10} {:>10} {:>10} {:>10}  best gene", "gen", "max", "min", "avg", "std");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>4} {:>10} {:>10} {:>10} {:>10}  {} ({})",
                r.index,
                fmt_sig(r.stats.max),
                fmt_sig(r.stats.min),
                fmt_sig(r.stats.avg),
                fmt_sig(r.stats.std),
                r.best,
                self.mapping_of(&r.best)
            );
        }
        if let Some(rank) = rank {
            out.push('\n');
            let spearman = rank.spearman.map(fmt_sig).unwrap_or_else(|| "undefined".into());
            let _ = writeln!(out, "rank preservation over {} genes (proxy vs full corpus): Spearman {spearman}", rank.rows.len());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub gene: Gene,
    pub mapping: String,
    pub proxy: f64,
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub rows: Vec<RankRow>,
    pub spearman: Option<f64>,
}

impl RankTable {
    pub fn new(rows: Vec<RankRow>) -> Self {
        let proxy: Vec<f64> = rows.iter().map(|r| r.proxy).collect();
        let full: Vec<f64> = rows.iter().map(|r| r.full).collect();
        Self { spearman: spearman(&proxy, &full), rows }
    }

    pub fn csv(&self) -> String {
        let proxy_ranks = elm_core::stats::average_ranks(&self.rows.iter().map(|r| -r.proxy).collect::<Vec<_>>());
        let full_ranks = elm_core::stats::average_ranks(&self.rows.iter().map(|r| -r.full).collect::<Vec<_>>());
        let rho = self.spearman.map(fmt_sig).unwrap_or_default();
        let mut out = String::from("Gene,Mapping,ProxyFitness,FullFitness,ProxyRank,FullRank,Spearman\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{rho}",
                r.gene,
                csv_field(&r.mapping),
                fmt_sig(r.proxy),
                fmt_sig(r.full),
                proxy_ranks[i],
                full_ranks[i]
            );
        }
        out
    }
}

/// Reads `full_corpus.csv` (Gene,Mapping,Fitness) and pairs it with the
/// proxy fitness of the same genes.
pub fn read_rank_table(path: &Path, summary: &RunSummary) -> anyhow::Result<RankTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let proxy: BTreeMap<String, f64> = summary.genes.iter().map(|(g, e)| (g.key(), e.fitness)).collect();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let gene_field = line.split(',').next().unwrap_or_default();
        let full_field = line.rsplit(',').next().unwrap_or_default();
        let gene: Gene = gene_field.parse().with_context(|| format!("{}:{}: bad gene", path.display(), n + 1))?;
        let full: f64 = full_field.parse().with_context(|| format!("{}:{}: bad fitness", path.display(), n + 1))?;
        let Some(&p) = proxy.get(&gene.key()) else {
            bail!("{}:{}: gene {gene} was not evaluated by the search", path.display(), n + 1);
        };
        rows.push(RankRow { mapping: summary.mapping_of(&gene), gene, proxy: p, full });
    }
    Ok(RankTable::new(rows))
}

pub fn full_corpus_csv(rows: &[(Gene, String, f64)]) -> String {
    let mut out = String::from("Gene,Mapping,Fitness\n");
    for (g, m, f) in rows {
        let _ = writeln!(out, "{g},{},{}", csv_field(m), fmt_sig(*f));
    }
    out
}

/// Files written by [`write_reports`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub stats: PathBuf,
    pub genes: PathBuf,
    pub best: PathBuf,
    pub report: PathBuf,
    pub rank: Option<PathBuf>,
    pub loss_curves: usize,
}

/// Regenerates every summary file of `run_dir` from its checkpoint.
pub fn write_reports(run_dir: &Path) -> anyhow::Result<(RunSummary, ReportFiles)> {
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        bail!("{} has no {CHECKPOINT_FILE}; not a search run directory", run_dir.display());
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let summary = RunSummary::from_checkpoint(&ckpt)?;
    let full = run_dir.join(FULL_CORPUS_FILE);
    let rank = if full.exists() { Some(read_rank_table(&full, &summary)?) } else { None };
    let files = ReportFiles {
        stats: run_dir.join(STATS_FILE),
        genes: run_dir.join(GENES_FILE),
        best: run_dir.join(BEST_FILE),
        report: run_dir.join(REPORT_FILE),
        rank: rank.as_ref().map(|_| run_dir.join(RANK_FILE)),
        loss_curves: std::fs::read_dir(run_dir.join(LOSS_DIR)).map(|d| d.count()).unwrap_or(0),
    };
    write_atomic(&files.stats, summary.stats_csv().as_bytes())?;
    write_atomic(&files.genes, summary.genes_csv().as_bytes())?;
    write_atomic(&files.best, summary.best_gene_txt().as_bytes())?;
    write_atomic(&files.report, summary.report_txt(rank.as_ref()).as_bytes())?;
    if let (Some(rank), Some(path)) = (&rank, &files.rank) {
        write_atomic(path, rank.csv().as_bytes())?;
    }
    Ok((summary, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(s: &str) -> Gene {
        s.parse().unwrap()
    }

    #[test]
    fn rank_table_matches_hand_computation() {
        let rows = [(0.1, 0.5), (0.2, 0.4), (0.3, 0.9), (0.4, 0.8)]
            .iter()
            .enumerate()
            .map(|(i, &(p, f))| RankRow { gene: g(&format!("00{}", i % 2)), mapping: "1,2".into(), proxy: p, full: f })
            .collect();
        let t = RankTable::new(rows);
        assert!((t.spearman.unwrap() - 0.6).abs() < 1e-12);
        let csv = t.csv();
        assert!(csv.starts_with("Gene,Mapping,ProxyFitness,FullFitness,ProxyRank,FullRank,Spearman\n"));
        // highest proxy fitness is rank 1
        let last = csv.lines().nth(4).unwrap();
        assert!(last.ends_with(",1,2,0.600000"), "{last}");
    }
}
