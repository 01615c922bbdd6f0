fn main() {
    std::process::exit(feedersim::cli::run_from(std::env::args_os()));
}
