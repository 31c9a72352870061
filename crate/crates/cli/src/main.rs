fn main() {
    std::process::exit(masklab_cli::run(std::env::args_os()));
}
