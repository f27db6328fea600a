fn main() {
    std::process::exit(peerfair::cli::run(std::env::args_os()));
}
