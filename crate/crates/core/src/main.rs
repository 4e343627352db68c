fn main() {
    std::process::exit(stochdyn::cli::run(std::env::args_os()));
}
