use std::process::ExitCode;

fn main() -> ExitCode {
    consingan::cli::main_with_args(std::env::args_os())
}
