fn main() {
    std::process::exit(fashionfae::cli::run(std::env::args_os()));
}
