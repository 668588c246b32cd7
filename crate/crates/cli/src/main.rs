fn main() {
    std::process::exit(msdmf_cli::run(std::env::args_os()));
}
