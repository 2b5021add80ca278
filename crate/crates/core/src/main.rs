fn main() {
    std::process::exit(adamorph::cli::run(std::env::args_os()));
}
