fn main() {
    std::process::exit(m3bat::cli::run(std::env::args_os()));
}
