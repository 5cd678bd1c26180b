fn main() {
    std::process::exit(tdoa_dtb::cli::main(std::env::args_os()));
}
