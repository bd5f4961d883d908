fn main() {
    std::process::exit(cdpa_cli::main_with_args(std::env::args_os()));
}
