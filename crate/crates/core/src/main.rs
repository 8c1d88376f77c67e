fn main() {
    std::process::exit(kalm::cli::run(std::env::args_os()));
}
