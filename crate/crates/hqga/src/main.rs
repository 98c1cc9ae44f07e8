fn main() {
    std::process::exit(hqga::cli::main_with_args(std::env::args_os()));
}
