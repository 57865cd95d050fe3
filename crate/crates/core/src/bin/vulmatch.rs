fn main() {
    std::process::exit(vulmatch::cli::dispatch(std::env::args_os()));
}
