fn main() {
    std::process::exit(selcf::cli::main_with_args(std::env::args_os()));
}
