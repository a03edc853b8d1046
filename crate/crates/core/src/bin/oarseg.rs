fn main() {
    std::process::exit(oarseg::cli::run(std::env::args_os()));
}
