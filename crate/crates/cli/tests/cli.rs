mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{read, tiny_config, write_config};

fn elm(args: &[&str], cache: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_elm"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("ELM_CACHE_DIR");
    if let Some(c) = cache {
        cmd.env("ELM_CACHE_DIR", c);
    }
    cmd.output().expect("run elm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn enumerate_counts_and_lists() {
    let o = elm(&["enumerate", "--teacher-layers", "12", "--student-layers", "6"], None);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "9375");

    let o = elm(&["enumerate", "--teacher-layers", "12", "--student-layers", "4", "--list"], None);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1048);
    assert!(out.lines().all(|l| l.split(',').count() == 4));
    assert_eq!(stderr(&o).trim(), "1048");

    let o = elm(&["enumerate", "--teacher-layers", "2", "--student-layers", "3"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("student layers 3"), "{}", stderr(&o));
}

#[test]
fn verify_reports_pass_lines() {
    let o = elm(&["verify"], None);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn config_errors_list_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(&dir.path().join("run"), 8, 1)
        .replace("[corpus]\n", "[corpus]\nvocab = 3\n")
        .replace("rho = 0.5", "rho = 0.5\nratio = 1")
        .replace("population_size = 6", "population_size = 6\nelitism = true");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let o = elm(&["search", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for key in ["vocab", "ratio", "elitism"] {
        assert!(err.contains(key), "{key} not reported: {err}");
    }
    assert!(!dir.path().join("run").exists());
}

#[test]
fn distill_rejects_crossing_mapping_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny_config(&dir.path().join("run"), 12, 1));
    let o = elm(&["distill", "--config", cfg.to_str().unwrap(), "--mapping", "5,3,0,10"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("position 2: 3 < previous non-None 5"), "{}", stderr(&o));
    assert!(!dir.path().join("run").join("cache").exists());
}

#[test]
fn distill_writes_snapshot_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = write_config(dir.path(), "c.toml", &tiny_config(&dir.path().join("run"), 12, 1));
    let cfg = cfg.to_str().unwrap();

    let o = elm(&["distill", "--config", cfg, "--heuristic", "uniform", "--rho", "0.5"], Some(&cache));
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path().join("run/distill/3-6-9-12.json"))).unwrap();
    assert_eq!(manifest["mapping"], "3,6,9,12");
    assert_eq!(manifest["task_scores"].as_object().unwrap().len(), 3);
    assert!(manifest["fitness"].as_f64().is_some());

    let out = dir.path().join("elm");
    let o = elm(&["distill", "--config", cfg, "--mapping", "0,0,5,10", "--out-dir", out.to_str().unwrap()], Some(&cache));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("0-0-5-10.bin").exists());
    let manifest: serde_json::Value = serde_json::from_str(&read(out.join("0-0-5-10.json"))).unwrap();
    assert_eq!(manifest["mapping"], "0,0,5,10");
    assert_eq!(manifest["distill"]["steps"], 15);
    let losses = read(out.join("0-0-5-10_loss.csv"));
    assert_eq!(losses.lines().count(), 16);
    // the teacher was trained once and reused
    assert_eq!(std::fs::read_dir(cache.join("teacher")).unwrap().count(), 2);
}

#[test]
fn search_writes_a_self_describing_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &tiny_config(&run, 8, 3));
    let o = elm(&["search", "--config", cfg.to_str().unwrap(), "--jobs", "2"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("generations: 5 of 5 (complete)"));

    for f in ["config.toml", "manifest.json", "checkpoint.json", "stats.csv", "genes.csv", "best_gene.txt", "report.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let stats = read(run.join("stats.csv"));
    let mut lines = stats.lines();
    assert_eq!(lines.next(), Some("Gen,Max,Min,Avg,Std,BestGene,BestMapping"));
    assert_eq!(lines.count(), 5);

    let checkpoint: serde_json::Value = serde_json::from_str(&read(run.join("checkpoint.json"))).unwrap();
    let unique = checkpoint["cache"].as_array().unwrap().len();
    assert_eq!(read(run.join("genes.csv")).lines().count(), unique + 1);
    assert_eq!(std::fs::read_dir(run.join("loss_curves")).unwrap().count(), unique);
    let manifest: serde_json::Value = serde_json::from_str(&read(run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 3);

    // the copied config reproduces the run on its own
    let copy = run.join("config.toml");
    let again = dir.path().join("again");
    let o = elm(&["search", "--config", copy.to_str().unwrap(), "--output-dir", again.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(again.join("stats.csv")), stats);

    // report regenerates identical files
    let before = read(run.join("report.txt"));
    std::fs::remove_file(run.join("stats.csv")).unwrap();
    let o = elm(&["report", run.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(run.join("stats.csv")), stats);
    assert_eq!(read(run.join("report.txt")), before);

    let o = elm(&["report", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &tiny_config(&run, 8, 3));
    let o = elm(&["search", "--config", cfg.to_str().unwrap(), "--stop-after", "1"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("generations: 1 of 5 (incomplete)"));
    let changed = write_config(dir.path(), "d.toml", &tiny_config(&run, 8, 4));
    let o = elm(&["search", "--config", changed.to_str().unwrap(), "--resume"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different configuration"), "{}", stderr(&o));
}

#[test]
fn checkpoint_version_mismatch_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &tiny_config(&run, 8, 3));
    let o = elm(&["search", "--config", cfg.to_str().unwrap(), "--stop-after", "1"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = run.join("checkpoint.json");
    let text = read(&path).replacen("\"version\": 1", "\"version\": 99", 1);
    std::fs::write(&path, text).unwrap();
    let o = elm(&["search", "--config", cfg.to_str().unwrap(), "--resume"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version mismatch"), "{}", stderr(&o));
}

#[test]
fn full_corpus_rank_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let text = tiny_config(&run, 8, 5).replace("[proxy]\n", "[report]\nfull_corpus_top = 4\n\n[proxy]\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let o = elm(&["search", "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(run.join("rank_table.csv"));
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("Gene,Mapping,ProxyFitness,FullFitness,ProxyRank,FullRank,Spearman"));
    assert_eq!(lines.count(), 4);
    assert!(read(run.join("report.txt")).contains("rank preservation over 4 genes"));
}
