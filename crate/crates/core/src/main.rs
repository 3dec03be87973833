fn main() {
    std::process::exit(forestsr::cli::run(std::env::args_os()));
}
