fn main() {
    std::process::exit(prgflow_cli::run(std::env::args_os()));
}
