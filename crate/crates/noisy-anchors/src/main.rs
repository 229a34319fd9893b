// SPDX-License-Identifier: Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use noisy_anchors::cli::{execute, Cli};

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
