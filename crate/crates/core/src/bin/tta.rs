use clap::Parser;
use tta_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
