fn main() {
    std::process::exit(dutycycle::cli::main());
}
