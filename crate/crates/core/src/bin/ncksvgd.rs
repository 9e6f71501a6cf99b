fn main() {
    std::process::exit(ncksvgd::experiments::cli::cli(std::env::args_os()));
}
