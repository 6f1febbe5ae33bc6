fn main() {
    std::process::exit(wsol::cli::run(std::env::args_os()));
}
