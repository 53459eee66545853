fn main() {
    env_logger::init();
    std::process::exit(glide::cli::run(std::env::args_os()));
}
