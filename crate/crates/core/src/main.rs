fn main() {
    std::process::exit(attnas::cli::run(std::env::args_os()));
}
