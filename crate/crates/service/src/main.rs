use std::process::ExitCode;

fn main() -> ExitCode {
    holonav::cli::main_with_args(std::env::args_os())
}
