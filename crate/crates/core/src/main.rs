fn main() {
    std::process::exit(latentlab::cli::run(std::env::args_os()));
}
