use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bsvi_core::{build_problem, list_problems, load_config, oracle_deviation, run_study, solve_single};
use clap::{Parser, Subcommand};

/// Monte Carlo convergence studies for penalized backward schemes.
#[derive(Parser)]
#[command(name = "bsvi-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the convergence study described by a config file.
    Run {
        config: PathBuf,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        /// Worker threads (overrides `workers` in the config).
        #[arg(long)]
        threads: Option<usize>,
        /// Also export the per-node solution at the smallest n.
        #[arg(long)]
        solution_csv: Option<PathBuf>,
    },
    /// List the registered problems.
    ListProblems,
    /// Compare the tree-exact solver with the brute-force tree oracle.
    OracleCheck {
        config: PathBuf,
        /// Maximum allowed node deviation.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            paths,
            threads,
            solution_csv,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.scheme.seed = seed;
            }
            if let Some(paths) = paths {
                cfg.scheme.num_paths = paths;
            }
            if let Some(threads) = threads {
                if threads == 0 {
                    bail!("--threads must be positive");
                }
                cfg.study.workers = threads;
            }
            let report = run_study(&cfg)?;
            match &out {
                Some(path) => {
                    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    let mut w = BufWriter::new(file);
                    report.write_csv(&mut w)?;
                    w.flush()?;
                }
                None => report.write_csv(std::io::stdout().lock())?,
            }
            let mut lines = report.summary();
            if out.is_none() {
                for line in &mut lines {
                    line.insert_str(0, "# ");
                }
            }
            for line in lines {
                println!("{line}");
            }
            if let Some(path) = solution_csv {
                let n = cfg.study.steps[0];
                let (forward, sol) = solve_single(&cfg, n)?;
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = BufWriter::new(file);
                sol.write_csv(&forward, &mut w)?;
                w.flush()?;
            }
            Ok(true)
        }
        Command::ListProblems => {
            for p in list_problems() {
                let reference = p.analytic.map(|a| format!(" [analytic:{a}]")).unwrap_or_default();
                println!("{:<16} {}{reference}", p.name, p.description);
            }
            Ok(true)
        }
        Command::OracleCheck { config, tol } => {
            let cfg = load_config(&config)?;
            let spec = build_problem(&cfg.problem)?;
            let steps: Vec<usize> = if cfg.study.steps.iter().all(|&n| n <= cfg.scheme.tree_cap) {
                cfg.study.steps.clone()
            } else {
                vec![2, 4, 6]
            };
            let mut ok = true;
            for n in steps {
                let dev = oracle_deviation(&spec, &cfg.scheme, n)?;
                let pass = dev <= tol;
                ok &= pass;
                println!("n = {n}: max deviation {dev:.3e} {}", if pass { "PASS" } else { "FAIL" });
            }
            Ok(ok)
        }
    }
}
