use clap::Parser;

fn main() {
    let cli = lampat_cli::Cli::parse();
    if let Err(e) = lampat_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
