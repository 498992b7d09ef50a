fn main() {
    std::process::exit(catnus::cli::run(std::env::args_os()));
}
