use clap::Parser;

fn main() {
    let cli = step_cli::Cli::parse();
    if let Err(e) = step_cli::run(cli) {
        eprintln!("step: {e}");
        std::process::exit(e.exit_code());
    }
}
