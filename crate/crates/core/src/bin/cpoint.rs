fn main() {
    std::process::exit(consistent_point::cli::main());
}
