use std::process::ExitCode;

fn main() -> ExitCode {
    mmcoord::cli::main_entry()
}
