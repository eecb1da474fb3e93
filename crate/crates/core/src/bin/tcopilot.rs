fn main() {
    std::process::exit(tcopilot::cli::run(std::env::args_os()));
}
