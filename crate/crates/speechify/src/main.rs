fn main() {
    std::process::exit(speechify::cli::main_with(std::env::args_os()));
}
