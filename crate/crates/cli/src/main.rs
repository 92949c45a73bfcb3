fn main() {
    std::process::exit(a2fpn_cli::run(std::env::args_os()));
}
