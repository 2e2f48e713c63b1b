fn main() {
    std::process::exit(dualpriv::cli::main());
}
