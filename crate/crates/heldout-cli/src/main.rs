fn main() {
    std::process::exit(heldout_cli::cli::cli_main(std::env::args_os()));
}
