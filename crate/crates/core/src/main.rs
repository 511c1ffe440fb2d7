fn main() {
    std::process::exit(nile::cli::run(std::env::args_os()));
}
