fn main() {
    std::process::exit(celsr::cli::run(std::env::args_os()));
}
