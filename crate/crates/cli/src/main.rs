fn main() {
    std::process::exit(derain_cli::run(std::env::args_os()));
}
