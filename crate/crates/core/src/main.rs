fn main() {
    std::process::exit(mask_adapter::cli::run(std::env::args_os()));
}
