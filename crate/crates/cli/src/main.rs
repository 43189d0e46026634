fn main() {
    std::process::exit(metareg_cli::run(std::env::args_os()));
}
