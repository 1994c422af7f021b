fn main() {
    std::process::exit(alevar::harness::cli::run(std::env::args_os()));
}
