fn main() {
    std::process::exit(alpha_pooling::cli::run(std::env::args_os()));
}
