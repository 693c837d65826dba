fn main() {
    std::process::exit(condchi_cli::run(std::env::args_os()));
}
