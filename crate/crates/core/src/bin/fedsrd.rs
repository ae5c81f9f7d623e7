fn main() {
    std::process::exit(fedsrd::cli::cli_main(std::env::args_os()));
}
