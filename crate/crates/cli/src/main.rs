fn main() {
    std::process::exit(lcs_cli::run(std::env::args_os()));
}
