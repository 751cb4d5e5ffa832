fn main() {
    std::process::exit(desklab::cli::run(std::env::args_os()));
}
