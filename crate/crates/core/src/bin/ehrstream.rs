fn main() {
    std::process::exit(ehrstream::cli::run(std::env::args_os()));
}
