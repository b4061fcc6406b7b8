use clap::Parser;

fn main() {
    let cli = crossmod::cli::Cli::parse();
    if let Err(e) = crossmod::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
