fn main() {
    std::process::exit(perfquant::cli::run(std::env::args_os()));
}
