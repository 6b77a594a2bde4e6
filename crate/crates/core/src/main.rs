fn main() {
    std::process::exit(hmmdist::cli::run(std::env::args_os()));
}
