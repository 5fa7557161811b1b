fn main() {
    std::process::exit(strokeseg_cli::main_with_args(std::env::args_os()));
}
