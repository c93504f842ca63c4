fn main() {
    std::process::exit(dalip_cli::run(std::env::args_os()));
}
