fn main() {
    std::process::exit(lorasa::cli::main_with_args(std::env::args_os()));
}
