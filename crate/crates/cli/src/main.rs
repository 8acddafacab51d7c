use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rvm_core::candidate::Budget;
use rvm_core::model::Model;
use rvm_core::runner::{self, RunConfig, RunReport, Variant};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rvm", version, about = "Relaxed virtual-memory litmus checker for Armv8-A")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Strong,
    Weak,
    Base,
}

#[derive(Subcommand)]
enum Command {
    /// Run tests and compare verdicts with their expectations.
    Run {
        /// Evaluate only this model (default: strong, strong+ets, weak and base).
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Enable ETS for the strong model.
        #[arg(long)]
        ets: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = Budget::default().max_candidates)]
        max_candidates: usize,
        /// Enumerate with the full descriptor choice set at every table cell.
        #[arg(long)]
        no_reduction: bool,
        /// Write witness graphs to this directory.
        #[arg(long)]
        emit_dot: Option<PathBuf>,
        /// Write SMT-LIB break-before-make checks to this directory.
        #[arg(long)]
        emit_smt: Option<PathBuf>,
        /// Print and draw the cycle that forbids each forbidden test.
        #[arg(long)]
        dump_cycle: bool,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the CSV report here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Check the strong model against the weak and base models on every candidate.
    Meta {
        /// Use a deliberately weakened strong model.
        #[arg(long)]
        mutate: bool,
        #[arg(long, default_value_t = Budget::default().max_candidates)]
        max_candidates: usize,
        /// Write counterexample graphs to this directory.
        #[arg(long)]
        emit_dot: Option<PathBuf>,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Print the per-test results table of a JSON report.
    Table {
        report: PathBuf,
        /// Print CSV instead of text.
        #[arg(long)]
        csv: bool,
    },
}

fn variants(model: Option<ModelArg>, ets: bool) -> Vec<Variant> {
    match model {
        None if ets => vec![Variant::ETS],
        None => Vec::new(),
        Some(ModelArg::Strong) => vec![Variant { model: Model::Strong, ets }],
        Some(ModelArg::Weak) => vec![Variant::WEAK],
        Some(ModelArg::Base) => vec![Variant::BASE],
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().command {
        Command::Run {
            model,
            ets,
            jobs,
            max_candidates,
            no_reduction,
            emit_dot,
            emit_smt,
            dump_cycle,
            report,
            csv,
            paths,
        } => {
            let cfg = RunConfig {
                variants: variants(model, ets),
                budget: Budget { max_candidates, reduction: !no_reduction },
                jobs,
                emit_dot,
                emit_smt,
                dump_cycle,
                mutate: false,
            };
            let rep = runner::run(&paths, &cfg)?;
            print!("{}", runner::render_report(&rep));
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_string_pretty(&rep)?).with_context(|| p.display().to_string())?;
            }
            if let Some(p) = csv {
                std::fs::write(&p, rep.to_csv()?).with_context(|| p.display().to_string())?;
            }
            Ok(rep.ok())
        }
        Command::Meta { mutate, max_candidates, emit_dot, paths } => {
            let budget = Budget { max_candidates, ..Budget::default() };
            let rep = runner::meta(&paths, budget, mutate, emit_dot.as_deref())?;
            println!(
                "{} tests; soundness checked on {} candidates; abstraction checked on {} candidates ({} not erasable)",
                rep.tests, rep.soundness_checked, rep.abstraction_checked, rep.abstraction_skipped
            );
            for c in &rep.counterexamples {
                println!("counterexample [{}] {} candidate {}: {}", c.suite, c.test, c.candidate, c.detail);
            }
            for e in &rep.errors {
                println!("error: {e}");
            }
            println!("{} counterexamples", rep.counterexamples.len());
            Ok(rep.counterexamples.is_empty() && rep.errors.is_empty())
        }
        Command::Table { report, csv } => {
            let text = std::fs::read_to_string(&report).with_context(|| report.display().to_string())?;
            let rep: RunReport = serde_json::from_str(&text)?;
            let (table, csv_text) = runner::results_table(&rep);
            print!("{}", if csv { csv_text } else { table });
            Ok(true)
        }
    }
}
