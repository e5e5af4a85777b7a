fn main() {
    std::process::exit(facecnn::cli::run(std::env::args_os()));
}
