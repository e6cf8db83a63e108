fn main() {
    std::process::exit(mossl::cli::run_from(std::env::args_os()));
}
