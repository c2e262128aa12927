use clap::Parser;

fn main() {
    let cli = ncl_cli::Cli::parse();
    std::process::exit(ncl_cli::run(cli));
}
