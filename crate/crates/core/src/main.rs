use std::process::ExitCode;

fn main() -> ExitCode {
    guided_admm::cli::main_with_args(std::env::args_os())
}
