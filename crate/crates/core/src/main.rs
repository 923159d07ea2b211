fn main() {
    std::process::exit(cpcvar::cli::main_with_args(std::env::args_os()));
}
