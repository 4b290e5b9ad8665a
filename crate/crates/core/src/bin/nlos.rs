fn main() {
    std::process::exit(nlos::cli::run(std::env::args_os()));
}
