fn main() {
    std::process::exit(qure::cli::dispatch(std::env::args_os()));
}
