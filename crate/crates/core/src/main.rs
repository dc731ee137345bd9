fn main() {
    let code = evground::cli::cli(std::env::args());
    std::process::exit(code);
}
