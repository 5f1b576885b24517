fn main() {
    std::process::exit(fig::cli::cli_main(std::env::args_os()));
}
