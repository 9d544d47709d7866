//! Command-line front end: generate corpora, train the conditioned
//! model and its baselines, evaluate context × task matrices,
//! materialize per-context adapters, and print parameter budgets.
//!
//! Exit codes: 0 on success, 1 for bad flags or invalid
//! configuration/input, 2 for runtime failures (corrupt files, broken
//! invariants, I/O).

mod data;
mod evalgen;
mod manifest;
mod train;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use zhyper::checks::{all_passed, run_all};
use zhyper::complexity::{
    budget_report_csv, budget_report_text, in_millions, method_budget, standard_budgets,
    with_separators, ArchSpec, HyperSpec, Method,
};
use zhyper::model::ModelConfig;
use zhyper::training::{TrainConfig, TrainMode};
use zhyper::{Error, Result};

#[derive(Parser)]
#[command(
    name = "zhyper",
    version,
    about = "Context-conditioned low-rank adapters from a shared signal network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus preset into a data directory
    GenData {
        /// Corpus recipe: desk, desk-acceptance, or desk-heldout
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Offset applied to every generation seed in the preset
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory to write corpora, contexts, and the manifest into
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a run: conditioned adapters, shared baseline, or per-task banks
    Train {
        /// Data directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Optional key = value file with model/training fields
        #[arg(long)]
        config: Option<PathBuf>,
        /// zhyper-diag, zhyper-square, mtl, or oracle
        #[arg(long)]
        mode: Option<String>,
        /// Signal shape for conditioned modes: diag or square
        #[arg(long)]
        variant: Option<String>,
        /// Optimizer steps (overrides the config file)
        #[arg(long)]
        steps: Option<usize>,
        /// Run seed (overrides the config file)
        #[arg(long)]
        seed: Option<u64>,
        /// Adapter rank (overrides the config file)
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Score a run: the full context × task matrix, or one adapter bank
    Eval {
        /// Data directory holding the eval splits
        #[arg(long)]
        data: PathBuf,
        /// Run directory from train
        #[arg(long)]
        run: PathBuf,
        /// Context store (default: contexts.zemb next to the data)
        #[arg(long)]
        contexts: Option<PathBuf>,
        /// Score this saved adapter bank instead of the full matrix
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Materialize and score this context's bank instead
        #[arg(long, value_name = "ID")]
        context_id: Option<String>,
        /// Where to write eval.txt/eval.csv (default: the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize one context's adapter bank to a .zadp file
    GenAdapter {
        /// Run directory holding the trained signal network
        #[arg(long)]
        run: PathBuf,
        /// Context id to look up in --contexts
        #[arg(long, value_name = "ID")]
        context_id: Option<String>,
        /// Context store the id resolves against
        #[arg(long)]
        contexts: Option<PathBuf>,
        /// Raw embedding vector (a .ztsr file) to condition on
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Free-form description; needs ZHYPER_EMBEDDER to embed it
        #[arg(long)]
        text: Option<String>,
        /// Output adapter file
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable-parameter budgets per method
    Params {
        /// Architecture the budgets are quoted for: ref-7b or desk
        #[arg(long, default_value = "ref-7b")]
        preset: String,
        /// Adapter rank
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Print one method's itemized budget instead of the table
        #[arg(long)]
        method: Option<String>,
        /// Emit machine-readable method,component,count rows
        #[arg(long)]
        csv: bool,
        /// Declared task count for the modeled hyperlora query table
        #[arg(long, default_value_t = 0)]
        hyperlora_tasks: usize,
    },
    /// Run the self-check suite and report each invariant
    Check {
        /// Seed for the randomized instances
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// Validation problems the user can fix exit 1; broken files and
/// violated invariants exit 2.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Key(_) => 1,
        Error::Shape { .. } | Error::Contract(_) | Error::Load { .. } | Error::Io(_) => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { preset, seed, out } => data::cmd_gen_data(&preset, seed, &out),
        Command::Train {
            data,
            out,
            config,
            mode,
            variant,
            steps,
            seed,
            rank,
        } => train::cmd_train(
            &data,
            &out,
            &train::TrainOverrides {
                config,
                mode,
                variant,
                steps,
                seed,
                rank,
            },
        ),
        Command::Eval {
            data,
            run,
            contexts,
            adapter,
            context_id,
            out,
        } => evalgen::cmd_eval(
            &data,
            &run,
            &evalgen::EvalOptions {
                contexts,
                adapter,
                context_id,
                out,
            },
        ),
        Command::GenAdapter {
            run,
            context_id,
            contexts,
            embedding,
            text,
            out,
        } => evalgen::cmd_gen_adapter(
            &run,
            &out,
            &evalgen::GenAdapterOptions {
                context_id,
                contexts,
                embedding,
                text,
            },
        ),
        Command::Params {
            preset,
            rank,
            method,
            csv,
            hyperlora_tasks,
        } => cmd_params(&preset, rank, method.as_deref(), csv, hyperlora_tasks),
        Command::Check { seed } => cmd_check(seed),
    }
}

/// The architecture and trunk widths a budget preset stands for.
fn params_specs(preset: &str, rank: usize, tasks: usize) -> Result<(ArchSpec, HyperSpec)> {
    match preset {
        "ref-7b" => {
            let mut hspec = HyperSpec::canonical();
            hspec.hyperlora_tasks = tasks;
            Ok((ArchSpec::ref_7b(rank), hspec))
        }
        "desk" => {
            let t = TrainConfig::desk_defaults(TrainMode::ZhyperDiag);
            Ok((
                ArchSpec::from_model(&ModelConfig::desk_7b_shape(), rank),
                HyperSpec {
                    d_c: 64,
                    d_t: t.hyper_d_t,
                    d_l: t.hyper_d_l,
                    d_mlp_in: t.hyper_d_in,
                    d_mlp_hidden: t.hyper_d_hidden,
                    d_mlp_out: t.hyper_d_out,
                    hyperlora_tasks: tasks,
                },
            ))
        }
        other => Err(Error::config(format!(
            "unknown preset {other:?}; expected ref-7b or desk"
        ))),
    }
}

fn cmd_params(
    preset: &str,
    rank: usize,
    method: Option<&str>,
    csv: bool,
    tasks: usize,
) -> Result<()> {
    let (spec, hspec) = params_specs(preset, rank, tasks)?;
    match method {
        Some(name) => {
            let method: Method = name
                .parse()
                .map_err(|e: Error| Error::config(e.to_string()))?;
            let b = method_budget(method, &spec, &hspec)?;
            let rows = [b.clone()];
            if csv {
                print!("{}", budget_report_csv(&rows));
                return Ok(());
            }
            println!(
                "method {}{}",
                b.method,
                if b.modeled { " (modeled)" } else { "" }
            );
            println!("lora {}", with_separators(b.lora_params));
            println!("hyper {}", with_separators(b.hyper_params));
            println!("embed {}", with_separators(b.embed_params));
            println!(
                "total {} ({})",
                with_separators(b.total),
                in_millions(b.total)
            );
            println!("per-context {}", with_separators(b.per_context_output_size));
            println!("capacity {}", b.rademacher_order);
        }
        None => {
            let rows = standard_budgets(&spec, &hspec)?;
            if csv {
                print!("{}", budget_report_csv(&rows));
            } else {
                print!("{}", budget_report_text(&rows));
            }
        }
    }
    Ok(())
}

fn cmd_check(seed: u64) -> Result<()> {
    let outcomes = run_all(seed);
    for o in &outcomes {
        match &o.outcome {
            Ok(detail) => println!("ok {} — {detail}", o.name),
            Err(e) => println!("FAIL {} — {e}", o.name),
        }
    }
    if all_passed(&outcomes) {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        let failed = outcomes.iter().filter(|o| o.outcome.is_err()).count();
        Err(Error::contract(format!(
            "{failed} of {} checks failed",
            outcomes.len()
        )))
    }
}
