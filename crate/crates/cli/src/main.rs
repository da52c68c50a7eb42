fn main() {
    std::process::exit(xinr_cli::run(std::env::args_os()));
}
