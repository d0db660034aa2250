fn main() {
    std::process::exit(distilvpr::cli::main_with_args(std::env::args_os()));
}
