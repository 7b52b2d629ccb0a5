fn main() {
    std::process::exit(cdsnas_cli::run(std::env::args_os()));
}
