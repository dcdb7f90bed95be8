fn main() {
    std::process::exit(xrat::cli::run(std::env::args_os()));
}
