//! Command-line entry point: config-driven dataset builds, training runs,
//! evaluation, probing, switch experiments, run comparison, and plot-data
//! emission.

use clap::{Parser, Subcommand};
use debias::attack::{joint_attack, plan_balancing_attack, AttackBatch};
use debias::dataset::{load_dataset, save_dataset};
use debias::experiment::{
    compare_runs, comparison_csv, emit_plot_data, run_experiment, run_switch_experiments_to_dir,
    ExperimentConfig, PlotKind, OUTPUT_ROOT_ENV,
};
use debias::metrics::{evaluate, transferability_probe};
use debias::model::load_composite;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "debias",
    about = "Adversarial-example data augmentation for visual debiasing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the colored-digit datasets and write their manifests.
    BuildDataset {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run one training experiment into a run directory.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Output root; defaults to $DEBIAS_OUTPUT_ROOT or ./runs.
        #[arg(short, long)]
        out_root: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a saved dataset and write a bias report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate adversarial examples for a checkpoint and run the
    /// cross-task transferability probe.
    Probe {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the label-switch generalization experiments.
    SwitchExperiments {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Aggregate run directories into a method-by-metric table.
    Compare {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Emit tabular plot data from run directories.
    EmitPlots {
        #[arg(long)]
        kind: String,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn output_root(cli_value: Option<PathBuf>) -> PathBuf {
    cli_value
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: &PathBuf) -> debias::Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)
}

fn run() -> debias::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::BuildDataset { config, out } => {
            let config = load_config(&config)?;
            let (train, test) = config.build_datasets()?;
            save_dataset(&train, &out.join("train"))?;
            save_dataset(&test, &out.join("test"))?;
            println!(
                "built {} train / {} test examples into {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Train { config, out_root } => {
            let config = load_config(&config)?;
            let root = output_root(out_root);
            let (dir, summary) = run_experiment(&config, &root)?;
            println!("run directory: {}", dir.display());
            println!(
                "method {} seed {}: status {}{}",
                summary.method,
                summary.seed,
                summary.status,
                summary
                    .final_bacc
                    .map(|b| format!(
                        ", bACC {:.2}, bias {:.3}",
                        b,
                        summary.final_bias.unwrap_or(f64::NAN)
                    ))
                    .unwrap_or_default()
            );
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            Ok(summary.exit_code)
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
        } => {
            let model = load_composite(&checkpoint)?;
            let test = load_dataset(&dataset)?;
            let report = evaluate(&model, &test)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&report).map_err(debias::Error::from)?)?;
            println!(
                "bACC {:.2} overall bias {:.3} -> {}",
                report.bacc,
                report.overall_bias,
                out.display()
            );
            Ok(0)
        }
        Command::Probe {
            config,
            checkpoint,
            out,
        } => {
            let config = load_config(&config)?;
            let mut model = load_composite(&checkpoint)?;
            let (train, test) = config.build_datasets()?;
            let plan = plan_balancing_attack(&train, config.method.seed);
            if plan.is_empty() {
                return Err(debias::Error::Attack(
                    "balanced dataset: no attack plan, probe undefined".into(),
                ));
            }
            let batch = AttackBatch::from_plan(&train, &plan);
            let result = joint_attack(&model, &batch, &config.attack)?;
            let adv = result.kept_adv(config.attack.success_rule);
            let labels: Vec<usize> = adv.b_attacked.iter().map(|&b| b as usize).collect();
            let settings = config.probe_settings();
            let r = transferability_probe(
                &mut model,
                &adv.pixels,
                &labels,
                &test,
                &settings.cfg,
                "cli-probe",
            )?;
            let payload = serde_json::json!({
                "transfer_acc": r,
                "attack_success_rate": result.success_rate,
                "plan_size": plan.len(),
            });
            std::fs::write(&out, serde_json::to_vec_pretty(&payload).map_err(debias::Error::from)?)?;
            println!("transferability r = {r:.2} -> {}", out.display());
            Ok(0)
        }
        Command::SwitchExperiments { config, out } => {
            let config = load_config(&config)?;
            let report = run_switch_experiments_to_dir(&config, &out)?;
            println!(
                "reference {:.2} | hard switch {:.2} | adv switch {:.2} | adv switch (robust) {:.2}",
                report.reference_acc,
                report.hard_switch_acc,
                report.adv_switch_acc,
                report.adv_switch_robust_acc
            );
            Ok(0)
        }
        Command::Compare { out, runs } => {
            let table = compare_runs(&runs)?;
            std::fs::write(&out, comparison_csv(&table))?;
            for row in &table.rows {
                println!(
                    "{:<14} runs={} bACC={} bias={}{}",
                    row.method,
                    row.runs,
                    row.bacc.map_or("--".into(), |v| format!("{v:.2}")),
                    row.bias.map_or("--".into(), |v| format!("{v:.3}")),
                    if row.inapplicable { " (inapplicable)" } else { "" }
                );
            }
            for c in &table.checks {
                println!("check: {} -> {}", c.name, c.holds);
            }
            Ok(0)
        }
        Command::EmitPlots { kind, out, runs } => {
            let kind: PlotKind = kind.parse()?;
            let written = emit_plot_data(&runs, kind, &out)?;
            for p in &written {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
