use clap::Parser;

fn main() {
    let cli = atphonon_cli::Cli::parse();
    if let Err(e) = atphonon_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
