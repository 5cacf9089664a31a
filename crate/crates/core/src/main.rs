fn main() {
    std::process::exit(temt::cli::run(std::env::args_os()));
}
