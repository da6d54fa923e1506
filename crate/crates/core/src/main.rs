fn main() {
    std::process::exit(hybridlv::cli::run(std::env::args_os()));
}
