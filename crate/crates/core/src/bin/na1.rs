fn main() {
    std::process::exit(na1::cli::run(std::env::args_os()));
}
