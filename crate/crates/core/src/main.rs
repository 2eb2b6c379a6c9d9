fn main() {
    std::process::exit(resfl_sim::cli::run(std::env::args_os()));
}
