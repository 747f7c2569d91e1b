fn main() {
    std::process::exit(curp::cli::run(std::env::args_os()));
}
