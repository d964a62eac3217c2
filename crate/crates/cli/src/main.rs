fn main() {
    std::process::exit(frameslide_cli::run(std::env::args_os()));
}
