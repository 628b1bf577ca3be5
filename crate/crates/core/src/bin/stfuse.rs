fn main() {
    std::process::exit(stfuse::cli::main_with_args(std::env::args_os()));
}
