fn main() {
    std::process::exit(medadapt::cli::run(std::env::args_os()));
}
