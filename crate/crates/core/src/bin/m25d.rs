fn main() {
    std::process::exit(malleable25d::cli::run(std::env::args_os()));
}
