fn main() {
    std::process::exit(kpr::cli::main_with(std::env::args_os()));
}
