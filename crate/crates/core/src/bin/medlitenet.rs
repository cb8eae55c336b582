fn main() {
    std::process::exit(medlitenet::cli::run(std::env::args_os()));
}
