fn main() {
    std::process::exit(bimapper::cli::run(std::env::args_os()));
}
