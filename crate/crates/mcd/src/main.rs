use std::process::ExitCode;

fn main() -> ExitCode {
    mcd::cli::run()
}
