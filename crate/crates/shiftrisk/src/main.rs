use clap::Parser;

fn main() {
    let cli = shiftrisk::cli::Cli::parse();
    std::process::exit(shiftrisk::cli::main_with(cli));
}
