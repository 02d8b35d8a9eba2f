fn main() {
    std::process::exit(mcgu::cli::run(std::env::args_os()));
}
