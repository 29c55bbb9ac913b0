use clap::Parser;

use vcal::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("VCAL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
