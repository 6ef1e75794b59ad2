//! `birdnet` command-line tool.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "birdnet",
    version,
    about = "Mine Boolean implications from tabular data and train implication-structured sparse networks",
    after_help = "Every flag can also be given as `key = value` in a --config file; flags win. \
Each run writes manifest.txt to the output directory, which can be passed back as --config."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    settings: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Binarize the features and write the layer-0 implication graph
    Mine,
    /// Construct the implication network (untrained) and its report
    Build,
    /// Build and train on all rows, with a stratified early-stopping split
    Train,
    /// Stratified cross-validation; writes per-fold metrics
    Eval(EvalArgs),
    /// Train on part of the data and score unit rules on the held-out rows
    Rules,
    /// Relevance trace of one instance through a trained model
    Explain(ExplainArgs),
    /// Write DOT graphs from an edge list or from a model's layers
    ExportGraph(ExportArgs),
    /// Dense baseline: convert a model, or train both variants on --data
    MatchedMlp(MatchedArgs),
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Also write every fold's fitted model
    #[arg(long)]
    save_models: bool,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    /// Model file written by train, rules or eval
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Sample id, or 0-based row number when no id matches
    #[arg(long)]
    instance: String,
    /// Class to explain (defaults to the predicted class)
    #[arg(long = "class", value_name = "NAME")]
    target: Option<String>,
    /// Units listed per layer
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Tab-separated edge list written by mine
    #[arg(long, value_name = "FILE", conflicts_with = "model", required_unless_present = "model")]
    edges: Option<PathBuf>,
    /// Model file; one graph per implication layer
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchedArgs {
    /// Convert this model instead of training on --data
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let s = settings::Settings::resolve(&cli.settings)?;
    let ctx = commands::Context::new(s)?;
    match cli.command {
        Command::Mine => commands::mine(&ctx),
        Command::Build => commands::build(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval(a) => commands::eval(&ctx, a.save_models),
        Command::Rules => commands::rules(&ctx),
        Command::Explain(a) => commands::explain(&ctx, &a.model, &a.instance, a.target.as_deref(), a.top),
        Command::ExportGraph(a) => commands::export_graph(&ctx, a.edges.as_deref(), a.model.as_deref()),
        Command::MatchedMlp(a) => commands::matched_mlp(&ctx, a.model.as_deref()),
    }
}
