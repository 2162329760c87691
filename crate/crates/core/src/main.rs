fn main() {
    std::process::exit(uavmeta::harness::cli::run(std::env::args_os()));
}
