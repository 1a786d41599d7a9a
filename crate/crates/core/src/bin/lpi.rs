fn main() {
    std::process::exit(lpi::cli::main_with_args(std::env::args_os()));
}
