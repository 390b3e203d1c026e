fn main() {
    std::process::exit(microcor_cli::run(std::env::args_os()));
}
