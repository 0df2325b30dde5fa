fn main() {
    std::process::exit(mever::cli::run(std::env::args_os()));
}
