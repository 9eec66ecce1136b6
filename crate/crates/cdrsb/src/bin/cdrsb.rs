use clap::Parser;

fn main() {
    let cli = cdrsb::cli::Cli::parse();
    if let Err(e) = cdrsb::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
