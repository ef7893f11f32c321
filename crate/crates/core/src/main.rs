fn main() {
    std::process::exit(dgp_rtn::cli::main_with(std::env::args_os()));
}
