fn main() {
    std::process::exit(forestmap::harness::cli::run(std::env::args_os()));
}
