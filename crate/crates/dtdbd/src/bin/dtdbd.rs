fn main() {
    std::process::exit(dtdbd::cli::run(std::env::args_os()));
}
