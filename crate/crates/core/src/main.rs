fn main() {
    std::process::exit(textguide::cli::run(std::env::args_os()));
}
