use clap::Parser;

fn main() -> std::process::ExitCode {
    kl_cli::main_with(kl_cli::Cli::parse())
}
