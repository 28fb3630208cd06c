use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdkf_core::harness::report::to_db;
use pdkf_core::harness::{emit_report, Experiment, ExperimentConfig, TheoryOutcome};
use pdkf_core::Result;

/// Partial-diffusion Kalman filter experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte-Carlo ensemble and write curves.csv, steady.csv and meta.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the steady-state predictions without simulating.
    Theory {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a configuration file and exit.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => {
            let experiment = Experiment::new(ExperimentConfig::load(&config)?)?;
            let report = experiment.run()?;
            for path in emit_report(&report, &out)? {
                println!("wrote {}", path.display());
            }
            for arm in &report.arms {
                let theory = arm
                    .theory
                    .network()
                    .map_or_else(|| "inapplicable".to_string(), |t| format!("{:.3} dB", to_db(t)));
                println!(
                    "{:<10} L={} steady {:.3} dB, theory {theory}, {} scalars/iteration",
                    arm.scheme,
                    arm.l,
                    to_db(arm.steady_network),
                    arm.scalars_per_iteration
                );
            }
        }
        Command::Theory { config } => {
            let experiment = Experiment::new(ExperimentConfig::load(&config)?)?;
            println!("scheme,L,node,msd_theory_db");
            for (arm, theory) in experiment.arms.iter().zip(experiment.theory()) {
                match theory {
                    TheoryOutcome::Available { per_node, network, .. } => {
                        for (k, v) in per_node.iter().enumerate() {
                            println!("{},{},{k},{:.6}", arm.label, arm.l, to_db(*v));
                        }
                        println!("{},{},network,{:.6}", arm.label, arm.l, to_db(network));
                    }
                    TheoryOutcome::Inapplicable { reason, .. } => {
                        println!("{},{},network,inapplicable ({reason})", arm.label, arm.l);
                    }
                }
            }
        }
        Command::Validate { config } => {
            let experiment = Experiment::new(ExperimentConfig::load(&config)?)?;
            println!(
                "ok: {} nodes, {} arms, {} runs of {} iterations",
                experiment.topology.node_count(),
                experiment.arms.len(),
                experiment.config.runs,
                experiment.config.horizon + 1
            );
        }
    }
    Ok(())
}
