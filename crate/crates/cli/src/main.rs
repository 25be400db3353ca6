use clap::Parser;

fn main() {
    let cli = stx::Cli::parse();
    if let Err(e) = stx::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
