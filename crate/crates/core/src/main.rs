use clap::Parser;

fn main() {
    let cli = dynalay::cli::Cli::parse();
    std::process::exit(dynalay::cli::run(cli));
}
