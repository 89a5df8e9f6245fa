fn main() {
    std::process::exit(nsvt_cli::main_with(std::env::args_os()));
}
