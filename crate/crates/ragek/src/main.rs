fn main() {
    std::process::exit(ragek::cli::run(std::env::args_os()));
}
