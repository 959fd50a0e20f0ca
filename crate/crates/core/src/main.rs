fn main() {
    std::process::exit(iss_node::cli::main_with_args(std::env::args_os()));
}
