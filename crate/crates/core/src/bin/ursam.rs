fn main() {
    std::process::exit(ursam_core::cli::cli_main(std::env::args_os()));
}
