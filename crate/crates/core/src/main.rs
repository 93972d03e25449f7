fn main() {
    std::process::exit(cdcr_core::cli::main());
}
