fn main() {
    std::process::exit(grapy::cli::main_with_args(std::env::args_os()));
}
