fn main() {
    std::process::exit(memlqr::cli::run(std::env::args_os()));
}
