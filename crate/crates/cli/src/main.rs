fn main() {
    std::process::exit(ecgtwin_cli::run(std::env::args_os()));
}
