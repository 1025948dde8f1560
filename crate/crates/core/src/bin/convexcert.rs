fn main() {
    std::process::exit(convexcert::cli::run(std::env::args_os()));
}
