fn main() {
    std::process::exit(scene4d::cli::main_with_args(std::env::args_os()));
}
