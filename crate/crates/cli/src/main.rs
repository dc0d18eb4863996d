fn main() {
    std::process::exit(ctxtts_cli::run(std::env::args_os()));
}
