fn main() {
    std::process::exit(gtsa::cli::dispatch(std::env::args_os()));
}
