fn main() {
    std::process::exit(samurai_cli::run());
}
