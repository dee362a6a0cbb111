fn main() {
    std::process::exit(tileperf::cli::run(std::env::args_os()));
}
