fn main() {
    std::process::exit(mohd::cli::run(std::env::args_os()));
}
