fn main() {
    std::process::exit(scarceops_cli::main_with(std::env::args_os()));
}
