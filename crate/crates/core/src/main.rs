fn main() {
    std::process::exit(anchor_codec::cli::run(std::env::args_os()));
}
