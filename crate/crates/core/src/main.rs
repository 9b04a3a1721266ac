fn main() {
    std::process::exit(pvscreen::cli::run(std::env::args_os()));
}
