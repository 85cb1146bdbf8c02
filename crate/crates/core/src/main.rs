use std::process::ExitCode;

fn main() -> ExitCode {
    focusrl::cli::main_with_args(std::env::args_os())
}
