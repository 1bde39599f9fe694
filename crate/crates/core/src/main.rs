fn main() {
    std::process::exit(mtcop_core::cli::run(std::env::args_os()));
}
