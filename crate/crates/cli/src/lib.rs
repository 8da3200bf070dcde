//! Command-line front end for the `packetlm` classifier: split generation,
//! training, evaluation, the multi-seed one-shot protocol, single-packet
//! prediction and attention export.

pub mod attention;
pub mod commands;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "packetlm", version, about = "Digit-level causal language model for packet classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build train/test CSVs and a manifest from labelled CSV input.
    Split(commands::SplitArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a labelled CSV.
    Eval(commands::EvalArgs),
    /// Repeat one-shot split, training and evaluation over several seeds.
    Oneshot(commands::OneshotArgs),
    /// Classify one packet.
    Predict(commands::PredictArgs),
    /// Export token- and field-level attention for one packet.
    Attention(commands::AttentionArgs),
    /// Generate the synthetic packet set and its schema.
    Synth(commands::SynthArgs),
}

/// Runs a parsed command and returns its summary text.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Split(a) => commands::cmd_split(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Oneshot(a) => commands::cmd_oneshot(a),
        Command::Predict(a) => commands::cmd_predict(a),
        Command::Attention(a) => commands::cmd_attention(a),
        Command::Synth(a) => commands::cmd_synth(a),
    }
}
