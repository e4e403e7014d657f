fn main() {
    std::process::exit(planeqc::cli::main_with_args(std::env::args_os()));
}
