fn main() {
    std::process::exit(permll::cli::run(std::env::args_os()));
}
