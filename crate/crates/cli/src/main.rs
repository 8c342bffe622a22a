fn main() {
    std::process::exit(protoid_cli::run(std::env::args_os()));
}
