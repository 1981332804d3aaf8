fn main() {
    std::process::exit(bitskip::cli::run(std::env::args_os()));
}
