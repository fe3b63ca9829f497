fn main() {
    std::process::exit(idsr::cli::run(std::env::args_os()));
}
