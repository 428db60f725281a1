use clap::Parser;

fn main() {
    let cli = downscale_cli::Cli::parse();
    if let Err(f) = downscale_cli::execute(cli) {
        eprintln!("error: {}", f.message());
        std::process::exit(f.code());
    }
}
