fn main() {
    std::process::exit(recovery_kit::cli::run(std::env::args_os()));
}
