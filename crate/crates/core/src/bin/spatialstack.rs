fn main() {
    std::process::exit(spatialstack::cli::main_with_args(std::env::args_os()));
}
