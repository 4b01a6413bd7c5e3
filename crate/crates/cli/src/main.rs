//! `xpert`: file-to-file stages of the expert extraction pipeline.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xpert_core::adaptation::SvdRank;
use xpert_core::tucker::TuckerRanks;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "xpert", version, about = "Extract, consolidate and transplant common MoE expert knowledge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Route domain data through an MoE model and write the activation log (JSONL)
    Profile(ProfileArgs),
    /// Score experts from an activation log and pick the common ones per layer
    Select(SelectArgs),
    /// Tucker-compress the selected experts of every layer and projection
    Consolidate(ConsolidateArgs),
    /// Collapse each pack to one matrix and resize it to the target dimensions
    Adapt(TargetArgs),
    /// Emit a dense model initialization from consolidated packs
    Init(TargetArgs),
    /// Run the synthetic end-to-end probe and write its loss curves
    Probe(ProbeArgs),
    /// Print the tensor manifest of a checkpoint as JSON
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// MoE model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Domain dataset checkpoint (`domain.<m>.tokens`)
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    log: PathBuf,
    /// Experts kept per layer, shared experts included
    #[arg(long, default_value_t = xpert_core::selection::DEFAULT_N_SELECTED)]
    n: usize,
    /// Comma-separated shared expert ids, always kept
    #[arg(long, value_delimiter = ',')]
    shared: Vec<usize>,
    /// N,M,L,K: experts, domains, layers, routed experts per token
    #[arg(long)]
    dims: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConsolidateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Selection report JSON
    #[arg(long)]
    selection: PathBuf,
    /// Tucker ranks R1,R2,R3, clamped to each tensor's extents
    #[arg(long, default_value_t = TuckerRanks::default())]
    ranks: TuckerRanks,
    /// Skip the HOOI refinement
    #[arg(long)]
    hosvd: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TargetArgs {
    /// Pack checkpoint written by `consolidate`
    #[arg(long)]
    pack: PathBuf,
    /// Dense target configuration JSON
    #[arg(long)]
    target_config: PathBuf,
    /// Overrides the seed in the target configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Retained singular triplets: "full" or a count
    #[arg(long, default_value = "full")]
    svd_rank: SvdRank,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Probe configuration JSON; the bundled default when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the first seed's teacher model and domain datasets here
    #[arg(long)]
    dump_teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Profile(a) => commands::profile(&a.model, &a.data, &a.out),
        Command::Select(a) => commands::select(&a.log, a.n, &a.shared, &a.dims, &a.out),
        Command::Consolidate(a) => commands::consolidate(&a.model, &a.selection, a.ranks, a.hosvd, &a.out),
        Command::Adapt(a) => commands::adapt(&a.pack, &a.target_config, a.seed, a.svd_rank, &a.out),
        Command::Init(a) => commands::init(&a.pack, &a.target_config, a.seed, a.svd_rank, &a.out),
        Command::Probe(a) => commands::probe(a.config.as_deref(), &a.out, a.dump_teacher.as_deref()),
        Command::Inspect(a) => commands::inspect(&a.path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
