fn main() {
    std::process::exit(hikonv::cli::run(std::env::args_os()));
}
