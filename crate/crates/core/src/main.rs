fn main() {
    std::process::exit(sacp::harness::cli::run(std::env::args_os()));
}
