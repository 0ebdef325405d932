fn main() {
    std::process::exit(kvlab::cli::run(std::env::args_os()));
}
