fn main() {
    std::process::exit(conflab::cli::main_with_args(std::env::args_os()));
}
