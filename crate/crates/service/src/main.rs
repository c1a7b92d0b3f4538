fn main() {
    std::process::exit(thematic_service::cli::run(std::env::args_os()));
}
