use std::process::ExitCode;

fn main() -> ExitCode {
    wsm_core::cli::main_with(std::env::args_os())
}
