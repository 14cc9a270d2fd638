fn main() {
    std::process::exit(sidelab::cli::main());
}
