fn main() {
    std::process::exit(mlp_core::cli::main_with_args(std::env::args_os()));
}
