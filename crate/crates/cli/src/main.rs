fn main() {
    std::process::exit(qenet_cli::dispatch(std::env::args_os()));
}
