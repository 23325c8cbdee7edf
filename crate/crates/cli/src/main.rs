fn main() {
    std::process::exit(assim_cli::main_with_args(std::env::args_os()));
}
