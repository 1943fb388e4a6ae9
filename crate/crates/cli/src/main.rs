fn main() {
    std::process::exit(movelab_cli::run(std::env::args_os()));
}
