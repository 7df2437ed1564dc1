fn main() {
    std::process::exit(ccss_server::cli::run(std::env::args_os()));
}
