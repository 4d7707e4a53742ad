fn main() {
    std::process::exit(roughflow::harness::cli_dispatch(std::env::args()));
}
