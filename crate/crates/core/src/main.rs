fn main() {
    std::process::exit(dpplearn::cli::run(std::env::args_os()));
}
