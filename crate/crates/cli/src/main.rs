fn main() {
    std::process::exit(tgv_cli::main_with_args(std::env::args_os()));
}
