fn main() {
    std::process::exit(storage_pricer::cli::run(std::env::args_os()));
}
