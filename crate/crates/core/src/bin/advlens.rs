use std::process::ExitCode;

fn main() -> ExitCode {
    advlens::cli::main_from_args(std::env::args_os())
}
