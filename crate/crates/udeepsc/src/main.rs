fn main() {
    std::process::exit(udeepsc::cli::run(std::env::args().collect()));
}
