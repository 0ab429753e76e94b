use std::process::ExitCode;

fn main() -> ExitCode {
    compact_attn::cli::main_with_args(std::env::args_os())
}
