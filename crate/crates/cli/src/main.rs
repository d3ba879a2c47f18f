fn main() {
    std::process::exit(freqnet_cli::run(std::env::args_os()));
}
