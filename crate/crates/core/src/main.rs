fn main() {
    std::process::exit(latentset::cli::main_with_args(std::env::args_os()));
}
