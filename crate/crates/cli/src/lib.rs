//! Command-line front end: argument parsing, command implementations and the
//! exit-code contract.

pub mod args;
pub mod commands;
pub mod error;

use std::io::Write;

pub use args::{Cli, Command};
pub use error::CliError;

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, out),
        Command::Train(a) => commands::train(a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::Infer(a) => commands::infer(a, out),
        Command::DumpAttention(a) => commands::dump_attention(a, out),
        Command::DumpFeatures(a) => commands::dump_features(a, out),
        Command::Gradcheck(a) => commands::gradcheck(a, out),
    }
}
