fn main() {
    std::process::exit(cbm::cli::main_with_args(std::env::args()));
}
