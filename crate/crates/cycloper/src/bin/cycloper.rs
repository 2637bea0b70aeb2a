fn main() {
    std::process::exit(cycloper::cli::run(std::env::args_os()));
}
