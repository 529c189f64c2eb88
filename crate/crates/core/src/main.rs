fn main() {
    std::process::exit(diffstyle::cli::main_with_args(std::env::args_os()));
}
