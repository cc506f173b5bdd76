fn main() {
    std::process::exit(colorguard::cli::run());
}
