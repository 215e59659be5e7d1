use clap::Parser;
use sst_core::cli::{error_record, run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", error_record(&e));
        std::process::exit(1);
    }
}
