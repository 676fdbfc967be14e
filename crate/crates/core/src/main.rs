use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(multirate::harness::cli_main(std::env::args()) as u8)
}
