fn main() {
    std::process::exit(l0flow_cli::run_cli(std::env::args_os()));
}
