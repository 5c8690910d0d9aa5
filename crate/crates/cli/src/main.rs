fn main() {
    std::process::exit(rsnn_cli::run(std::env::args_os()));
}
