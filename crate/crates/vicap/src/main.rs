use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vicap::cli::run(std::env::args()) as u8)
}
