use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vrag::decoding::DecodeStrategy;
use vrag::error::Result;
use vrag::objectives::Objective;
use vrag::pipeline::{
    cmd_evaluate, cmd_generate_data, cmd_study_klcheck, cmd_study_memorization, cmd_study_topk,
    cmd_train, load_config, ExperimentConfig, Overrides,
};

/// Train and evaluate retrieval-grounded response generators.
#[derive(Parser)]
#[command(name = "vrag", version, about)]
struct Cli {
    /// Experiment config file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run only this seed, overriding the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training objective: rag or vrag.
    #[arg(long, global = true)]
    objective: Option<Objective>,

    /// Retrieval truncation for training and grounded decoding.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Refine the decoder against the marginal objective after training.
    #[arg(long, global = true)]
    finetune: bool,

    /// Restrict evaluation to one decode strategy: top1 or topk.
    #[arg(long, global = true)]
    strategy: Option<DecodeStrategy>,

    /// Root directory for run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus described by the config.
    GenerateData,
    /// Train one model per seed; writes checkpoints and epoch logs.
    Train,
    /// Score each seed's checkpoint on the test split.
    Evaluate,
    /// Standing analyses over trained models or the math itself.
    Study {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Measure how much generation quality depends on the gold documents.
    Memorization,
    /// Retrain across the configured k grid and tabulate test recall.
    Topk,
    /// Randomized verification of the KL truncation bound.
    Klcheck {
        /// Replace the derived truncation threshold (expected to fail).
        #[arg(long)]
        delta: Option<f64>,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&Overrides {
        seed: cli.seed,
        objective: cli.objective,
        k: cli.k,
        finetune: cli.finetune,
        strategy: cli.strategy,
        out: cli.out.clone(),
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::GenerateData => {
            let s = cmd_generate_data(&cfg)?;
            println!(
                "wrote {} documents and {}/{}/{} train/val/test instances to {}",
                s.documents,
                s.train,
                s.val,
                s.test,
                s.data_dir.display()
            );
        }
        Command::Train => {
            for s in cmd_train(&cfg)? {
                let tag = if s.finetuned { " (finetuned)" } else { "" };
                println!(
                    "seed {}: {} epochs, best epoch {} with val R@1 {:.4}{} -> {}",
                    s.seed,
                    s.epochs,
                    s.best_epoch,
                    s.best_val_r1,
                    tag,
                    s.run_dir.display()
                );
            }
        }
        Command::Evaluate => {
            for s in cmd_evaluate(&cfg)? {
                println!(
                    "seed {}: prior R@1 {:.4}, R@5 {:.4}, MRR@5 {:.4} -> {}",
                    s.seed,
                    s.report.prior.r_at_1,
                    s.report.prior.r_at_5,
                    s.report.prior.mrr_at_5,
                    s.metrics_path.display()
                );
                for (strategy, m) in &s.report.strategies {
                    println!(
                        "  {}: B-1 {:.2}, B-4 {:.2}, penalized {:.2}/{:.2}",
                        strategy, m.b1, m.b4, m.penalized_b1, m.penalized_b4
                    );
                }
            }
        }
        Command::Study { study } => match study {
            Study::Memorization => {
                for s in cmd_study_memorization(&cfg)? {
                    for r in &s.rows {
                        println!(
                            "seed {} {} {}: {:.2} -> {:.2} ({:+.2}%)",
                            s.seed, r.strategy, r.metric, r.before, r.after, r.drop_percent
                        );
                    }
                    println!("seed {}: report -> {}", s.seed, s.report_path.display());
                }
            }
            Study::Topk => {
                let s = cmd_study_topk(&cfg)?;
                for c in &s.cells {
                    println!(
                        "{} k={} seed={}: R@1 {:.4}, R@3 {:.4}, R@5 {:.4}",
                        c.objective, c.k, c.seed, c.test.r_at_1, c.test.r_at_3, c.test.r_at_5
                    );
                }
                println!("table -> {}", s.study_dir.display());
            }
            Study::Klcheck { delta } => {
                let report = cmd_study_klcheck(&cfg, delta)?;
                for c in &report.cells {
                    println!(
                        "N={} eps={}: delta={:.3e}, max |err| {:.3e}, {}/{} violations",
                        c.support, c.epsilon, c.delta, c.max_abs_err, c.violations, c.trials
                    );
                }
                report.check()?;
                println!("truncation bound held in every trial");
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(err.exit_code())
        }
    }
}
