fn main() {
    std::process::exit(relu_landscape::cli::run(std::env::args_os()));
}
