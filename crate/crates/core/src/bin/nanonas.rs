fn main() {
    std::process::exit(nanonas::cli::main_with_args(std::env::args_os()));
}
