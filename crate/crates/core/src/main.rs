fn main() {
    std::process::exit(epiforge::cli::run_cli(std::env::args_os()));
}
