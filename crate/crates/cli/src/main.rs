fn main() {
    std::process::exit(dmf_cli::run(std::env::args_os()));
}
