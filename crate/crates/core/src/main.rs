fn main() {
    std::process::exit(roofrisk::cli::run_command(std::env::args_os()));
}
