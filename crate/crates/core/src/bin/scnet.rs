fn main() {
    std::process::exit(spatial_contrast::cli::run(std::env::args_os()));
}
