fn main() {
    std::process::exit(dmcm_core::cli::main_with(std::env::args_os()));
}
