fn main() {
    std::process::exit(prodmix_cli::cli_main(std::env::args_os()));
}
