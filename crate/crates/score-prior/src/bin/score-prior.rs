use clap::Parser;

fn main() {
    let cli = score_prior::cli::Cli::parse();
    if let Err(e) = score_prior::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
