fn main() {
    std::process::exit(celda::cli::main());
}
