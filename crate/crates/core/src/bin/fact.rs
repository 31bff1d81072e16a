fn main() {
    std::process::exit(fact::cli::run(std::env::args_os()));
}
