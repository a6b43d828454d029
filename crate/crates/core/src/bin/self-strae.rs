fn main() {
    std::process::exit(selfstrae::cli::run(std::env::args_os()));
}
