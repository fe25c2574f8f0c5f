fn main() {
    std::process::exit(m2ctts_core::cli::main_with_args(std::env::args_os()));
}
