fn main() {
    std::process::exit(pfbdiff::cli::run(std::env::args_os()));
}
