fn main() {
    std::process::exit(lace::cli::run());
}
