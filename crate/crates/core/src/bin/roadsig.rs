fn main() {
    std::process::exit(roadsig::cli::main_with(std::env::args_os()));
}
