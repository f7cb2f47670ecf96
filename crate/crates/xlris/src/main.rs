fn main() {
    std::process::exit(xlris::cli::run(std::env::args_os()));
}
