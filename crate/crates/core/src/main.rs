use clap::Parser;

fn main() {
    let args = mnp::cli::Args::parse();
    std::process::exit(mnp::cli::main_with_args(args));
}
