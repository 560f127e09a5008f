fn main() {
    std::process::exit(ordsim_cli::run(std::env::args_os()));
}
