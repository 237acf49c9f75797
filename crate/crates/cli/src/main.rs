use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(hexform_cli::run(std::env::args_os()))
}
