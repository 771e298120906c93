use std::process::ExitCode;

fn main() -> ExitCode {
    longfin::cli::main()
}
