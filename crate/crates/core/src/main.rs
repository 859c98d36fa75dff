fn main() {
    std::process::exit(casnet::cli::run(std::env::args_os()));
}
