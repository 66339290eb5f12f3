fn main() {
    std::process::exit(linpo::harness::cli_main(std::env::args_os()));
}
