use clap::Parser;
use implicit_meanfield::cli::{init_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(f) = init_threads() {
        eprintln!("error: {}", f.message);
        std::process::exit(f.code);
    }
    std::process::exit(run(cli));
}
