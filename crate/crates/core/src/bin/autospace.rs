fn main() {
    std::process::exit(autospace::cli::run(std::env::args_os()));
}
