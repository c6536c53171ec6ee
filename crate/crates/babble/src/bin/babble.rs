fn main() {
    std::process::exit(babble::cli::main_with_args(std::env::args()));
}
