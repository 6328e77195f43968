fn main() {
    std::process::exit(chartless::harness::cli::run(std::env::args_os()));
}
