use clap::Parser;

fn main() {
    let cli = hosigen::cli::Cli::parse();
    std::process::exit(hosigen::cli::run(cli));
}
