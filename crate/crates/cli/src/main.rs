fn main() {
    std::process::exit(ceutrack_cli::run(std::env::args_os()));
}
