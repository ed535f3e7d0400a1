use clap::Parser;

fn main() {
    let cli = apmg_cli::commands::Cli::parse();
    if let Err(e) = apmg_cli::commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
