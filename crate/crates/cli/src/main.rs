fn main() {
    std::process::exit(vbdo_cli::run(std::env::args_os()));
}
