fn main() {
    std::process::exit(swp::cli::run(std::env::args_os()));
}
