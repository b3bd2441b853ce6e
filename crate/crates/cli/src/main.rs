fn main() {
    std::process::exit(datadesign_cli::run(std::env::args_os()));
}
