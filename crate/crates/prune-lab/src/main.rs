use clap::Parser;

fn main() {
    let cli = prune_lab::cli::Cli::parse();
    std::process::exit(prune_lab::cli::run(cli));
}
