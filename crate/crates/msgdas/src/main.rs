fn main() {
    std::process::exit(msgdas::cli_main(std::env::args_os()));
}
