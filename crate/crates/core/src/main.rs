fn main() {
    std::process::exit(tradespace::cli::main());
}
