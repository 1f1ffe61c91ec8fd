fn main() {
    std::process::exit(ratediff::cli::run(std::env::args_os()));
}
