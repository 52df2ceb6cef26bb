fn main() {
    std::process::exit(narvid::cli::run(std::env::args_os()));
}
