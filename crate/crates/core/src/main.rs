fn main() {
    std::process::exit(derain::cli::run(std::env::args_os()));
}
