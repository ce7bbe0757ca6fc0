fn main() {
    std::process::exit(ccf_cli::run(std::env::args_os()));
}
