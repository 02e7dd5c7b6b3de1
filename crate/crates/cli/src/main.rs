use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use elm_cli::commands::{cmd_distill, cmd_enumerate, cmd_report, cmd_search, cmd_verify, DistillArgs, SearchArgs};
use elm_cli::config::toy_config_toml;
use elm_core::Heuristic;

#[derive(Parser)]
#[command(name = "elm", version, about = "Evolutionary search for layer mappings in transformer distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load) the teacher and run the genetic search.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Concurrent gene evaluations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Stop after this many generations (resumable).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Count the mappings of a search space.
    Enumerate {
        #[arg(long)]
        teacher_layers: usize,
        #[arg(long)]
        student_layers: usize,
        /// Print every mapping; the count then goes to stderr.
        #[arg(long)]
        list: bool,
        #[arg(long)]
        cap: Option<u64>,
    },
    /// Distill one student with a given or heuristic mapping.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated teacher layers, 0 for no supervision, e.g. 0,0,5,10.
        #[arg(long, conflicts_with = "heuristic", required_unless_present = "heuristic")]
        mapping: Option<String>,
        /// uniform, last-layer or contribution.
        #[arg(long)]
        heuristic: Option<Heuristic>,
        /// Fraction of the corpus used for distillation.
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Regenerate the summary files of a run directory.
    Report { run_dir: PathBuf },
    /// Check the search-space counts, codec and oracles.
    Verify,
    /// Print the default toy configuration.
    ExampleConfig {
        #[arg(long, default_value = "runs/toy")]
        output_dir: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    match cli.command {
        Command::Search { config, resume, jobs, output_dir, stop_after } => {
            let outcome = cmd_search(&SearchArgs { config, resume, jobs, output_dir, stop_after })?;
            print!("{}", std::fs::read_to_string(outcome.run_dir.join(elm_cli::report::REPORT_FILE))?);
        }
        Command::Enumerate { teacher_layers, student_layers, list, cap } => {
            cmd_enumerate(teacher_layers, student_layers, list, cap, &mut out, &mut err)?;
        }
        Command::Distill { config, mapping, heuristic, rho, out_dir } => {
            let report = cmd_distill(&DistillArgs { config, mapping, heuristic, rho, out_dir })?;
            println!("mapping ({}) fitness {:.4}", report.manifest.mapping, report.manifest.fitness.unwrap_or(f64::NAN));
            for (task, score) in &report.manifest.task_scores {
                println!("  {task}: {score:.4}");
            }
            println!("{}", report.manifest_path.display());
        }
        Command::Report { run_dir } => {
            cmd_report(&run_dir, &mut out)?;
        }
        Command::Verify => return cmd_verify(&mut out),
        Command::ExampleConfig { output_dir } => print!("{}", toy_config_toml(&output_dir)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
