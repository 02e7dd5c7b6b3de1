//! Run configuration: one TOML file describing a whole experiment.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use elm_core::mapping_space::{ArchPair, SearchSpace};
use elm_core::rng::label_seed;
use elm_core::{CorpusSpec, DistillConfig, FinetuneConfig, GaConfig, PretrainConfig, ProxyConfig, TaskSizes, TransformerConfig};

/// Every problem found in a configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem{}):", self.problems.len(), if self.problems.len() == 1 { "" } else { "s" })?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// GA settings as written in the config; the seed comes from the top-level
/// `seed` and the population size defaults by student depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaSection {
    pub generations: Option<usize>,
    pub population_size: Option<usize>,
    pub mutation_prob: Option<f64>,
    pub crossover_prob: Option<f64>,
    pub bitflip_rate: Option<f64>,
    pub exchange_rate: Option<f64>,
    pub max_repair_attempts: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Re-evaluate this many of the best genes on the full corpus after the
    /// search and emit a rank-preservation table.
    pub full_corpus_top: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProxyTop {
    #[serde(default = "default_rho")]
    rho: f64,
    #[serde(default = "default_proxy_seed")]
    seed: u64,
}

fn default_rho() -> f64 {
    ProxyConfig::default().rho
}

fn default_proxy_seed() -> u64 {
    ProxyConfig::default().seed
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub teacher: TransformerConfig,
    pub student: TransformerConfig,
    pub corpus: CorpusSpec,
    pub pretrain: PretrainConfig,
    pub ga: GaConfig,
    pub proxy: ProxyConfig,
    pub report: ReportConfig,
}

const TOP_KEYS: [&str; 9] = ["seed", "output_dir", "teacher", "student", "corpus", "pretrain", "ga", "proxy", "report"];

fn section<T: DeserializeOwned>(table: &toml::Table, key: &str, problems: &mut Vec<String>) -> Option<T> {
    let value = table.get(key)?;
    match value.clone().try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("[{key}] {}", e.message().trim()));
            None
        }
    }
}

fn section_or_default<T: DeserializeOwned + Default>(table: &toml::Table, key: &str, problems: &mut Vec<String>) -> Option<T> {
    if table.contains_key(key) {
        section(table, key, problems)
    } else {
        Some(T::default())
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError { problems: vec![e.to_string().trim().to_string()] })?;
        let mut problems = Vec::new();
        for key in table.keys() {
            if !TOP_KEYS.contains(&key.as_str()) {
                problems.push(format!("unknown key `{key}`"));
            }
        }
        let seed = match table.get("seed") {
            None => Some(0),
            Some(toml::Value::Integer(v)) if *v >= 0 => Some(*v as u64),
            Some(other) => {
                problems.push(format!("seed: expected a non-negative integer, found {other}"));
                None
            }
        };
        let output_dir = match table.get("output_dir") {
            Some(toml::Value::String(s)) if !s.is_empty() => Some(PathBuf::from(s)),
            Some(other) => {
                problems.push(format!("output_dir: expected a non-empty string, found {other}"));
                None
            }
            None => {
                problems.push("missing key `output_dir`".to_string());
                None
            }
        };
        let required = |key: &str, problems: &mut Vec<String>| -> Option<TransformerConfig> {
            if !table.contains_key(key) {
                problems.push(format!("missing section [{key}]"));
                return None;
            }
            section(&table, key, problems)
        };
        let teacher = required("teacher", &mut problems);
        let student = required("student", &mut problems);
        let corpus: Option<CorpusSpec> = section_or_default(&table, "corpus", &mut problems);
        let pretrain: Option<PretrainConfig> = section_or_default(&table, "pretrain", &mut problems);
        let report: Option<ReportConfig> = section_or_default(&table, "report", &mut problems);
        let ga: Option<GaSection> = if table.contains_key("ga") {
            section(&table, "ga", &mut problems)
        } else {
            Some(GaSection {
                generations: None,
                population_size: None,
                mutation_prob: None,
                crossover_prob: None,
                bitflip_rate: None,
                exchange_rate: None,
                max_repair_attempts: None,
            })
        };
        let proxy = Self::proxy_section(&table, &mut problems);

        let (Some(seed), Some(output_dir), Some(teacher), Some(student), Some(corpus), Some(pretrain), Some(ga), Some(proxy), Some(report)) =
            (seed, output_dir, teacher, student, corpus, pretrain, ga, proxy, report)
        else {
            return Err(ConfigError { problems });
        };
        let base = GaConfig::for_student_layers(student.layers);
        let ga = GaConfig {
            generations: ga.generations.unwrap_or(base.generations),
            population_size: ga.population_size.unwrap_or(base.population_size),
            mutation_prob: ga.mutation_prob.unwrap_or(base.mutation_prob),
            crossover_prob: ga.crossover_prob.unwrap_or(base.crossover_prob),
            bitflip_rate: ga.bitflip_rate.unwrap_or(base.bitflip_rate),
            exchange_rate: ga.exchange_rate.unwrap_or(base.exchange_rate),
            seed,
            max_repair_attempts: ga.max_repair_attempts.unwrap_or(base.max_repair_attempts),
        };
        let config = Self { seed, output_dir, teacher, student, corpus, pretrain, ga, proxy, report };
        config.validate_into(&mut problems);
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError { problems })
        }
    }

    fn proxy_section(table: &toml::Table, problems: &mut Vec<String>) -> Option<ProxyConfig> {
        let Some(value) = table.get("proxy") else { return Some(ProxyConfig::default()) };
        let Some(proxy) = value.as_table() else {
            problems.push("[proxy] expected a table".to_string());
            return None;
        };
        let mut rest = proxy.clone();
        let tasks: Option<TaskSizes> = section_or_default(proxy, "tasks", problems);
        let distill: Option<DistillConfig> = section_or_default(proxy, "distill", problems);
        let finetune: Option<FinetuneConfig> = section_or_default(proxy, "finetune", problems);
        for k in ["tasks", "distill", "finetune"] {
            rest.remove(k);
        }
        let top = match toml::Value::Table(rest).try_into::<ProxyTop>() {
            Ok(t) => Some(t),
            Err(e) => {
                problems.push(format!("[proxy] {}", e.message().trim()));
                None
            }
        };
        // errors inside sub-tables are reported with their full path
        for p in problems.iter_mut() {
            for k in ["tasks", "distill", "finetune"] {
                if let Some(rest) = p.strip_prefix(&format!("[{k}]")) {
                    *p = format!("[proxy.{k}]{rest}");
                }
            }
        }
        let (tasks, distill, finetune, top) = (tasks?, distill?, finetune?, top?);
        Some(ProxyConfig { rho: top.rho, tasks, distill, finetune, seed: top.seed })
    }

    fn validate_into(&self, problems: &mut Vec<String>) {
        for (name, c) in [("teacher", &self.teacher), ("student", &self.student)] {
            if let Err(e) = c.validate() {
                problems.push(format!("[{name}] {e}"));
            }
            if c.vocab_size != self.corpus.vocab_size {
                problems.push(format!("[{name}] vocab_size {} differs from corpus vocab_size {}", c.vocab_size, self.corpus.vocab_size));
            }
            if c.max_seq_len < self.corpus.seq_len {
                problems.push(format!("[{name}] max_seq_len {} is shorter than corpus seq_len {}", c.max_seq_len, self.corpus.seq_len));
            }
        }
        if self.teacher.heads != self.student.heads {
            problems.push(format!("[student] heads {} must equal teacher heads {}", self.student.heads, self.teacher.heads));
        }
        match ArchPair::new(self.teacher.layers, self.student.layers).and_then(SearchSpace::build) {
            Ok(_) => {}
            Err(e) => problems.push(format!("layer counts: {e}")),
        }
        if let Err(e) = self.corpus.validate() {
            problems.push(format!("[corpus] {e}"));
        }
        if let Err(e) = self.pretrain.validate() {
            problems.push(format!("[pretrain] {e}"));
        }
        if let Err(e) = self.ga.validate() {
            problems.push(format!("[ga] {e}"));
        }
        if let Err(e) = self.proxy.validate() {
            problems.push(format!("[proxy] {e}"));
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let config = Self::from_toml_str(&text)?;
        Ok((config, text))
    }

    pub fn arch(&self) -> ArchPair {
        ArchPair { teacher_layers: self.teacher.layers, student_layers: self.student.layers }
    }

    /// Identifies a trained teacher.
    pub fn teacher_key(&self) -> String {
        let json = serde_json::to_string(&(&self.teacher, &self.corpus, &self.pretrain)).expect("serialisable");
        format!("{:016x}", label_seed(&json))
    }

    /// Identifies the fitness function (teacher, student and proxy setup).
    pub fn fitness_key(&self) -> String {
        let json = serde_json::to_string(&(self.teacher_key(), &self.student, &self.proxy)).expect("serialisable");
        format!("{:016x}", label_seed(&json))
    }

    /// Canonical TOML rendering, also used to stamp run directories.
    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("serialisable");
        if let Some(toml::Value::Table(ga)) = table.get_mut("ga") {
            ga.remove("seed");
        }
        toml::to_string(&table).expect("serialisable")
    }
}

/// The default desk-scale setup: 8-layer teacher, 4-layer student.
pub fn toy_config_toml(output_dir: &str) -> String {
    format!(
        r#"seed = 1
output_dir = "{output_dir}"

[teacher]
layers = 8
hidden_size = 32
ffn_size = 128
heads = 2
vocab_size = 64
max_seq_len = 16
seed = 1

[student]
layers = 4
hidden_size = 16
ffn_size = 64
heads = 2
vocab_size = 64
max_seq_len = 16
seed = 2

[corpus]
vocab_size = 64
seq_len = 16
num_sequences = 2000
seed = 7

[pretrain]
steps = 1500
batch_size = 16
learning_rate = 0.002

[ga]
generations = 5
population_size = 12

[proxy]
rho = 0.1

[proxy.tasks]
train = 256
dev = 512

[proxy.distill]
steps = 1000
batch_size = 8
learning_rate = 0.001

[proxy.finetune]
steps = 300
batch_size = 16
learning_rate = 0.001
"#
    )
}
