fn main() {
    std::process::exit(mgnet_cli::run_cli(std::env::args_os()));
}
