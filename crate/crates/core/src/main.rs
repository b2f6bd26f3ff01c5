fn main() {
    std::process::exit(naflow::cli::run(std::env::args_os()));
}
