fn main() {
    std::process::exit(fusionvitals::cli::run(std::env::args_os()));
}
