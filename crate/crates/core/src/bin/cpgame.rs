fn main() {
    std::process::exit(core_periphery::cli::main_with_args(std::env::args_os()));
}
