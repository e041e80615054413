fn main() {
    std::process::exit(srtc_cli::run(std::env::args_os()));
}
