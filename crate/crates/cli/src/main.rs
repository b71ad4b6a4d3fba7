fn main() {
    std::process::exit(dmlm_cli::main_with_args(std::env::args_os()));
}
