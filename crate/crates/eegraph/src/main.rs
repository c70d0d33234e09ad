fn main() {
    std::process::exit(eegraph::cli::main_with_args(std::env::args_os()));
}
