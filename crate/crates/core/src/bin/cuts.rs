fn main() {
    std::process::exit(cuts::cli::run_from(std::env::args_os()));
}
