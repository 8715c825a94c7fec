fn main() {
    std::process::exit(flowalign::harness::run_cli(std::env::args()));
}
