fn main() {
    std::process::exit(rubble_gateway::cli::run(std::env::args_os()));
}
