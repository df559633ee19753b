fn main() {
    std::process::exit(dgdetr_cli::run(std::env::args_os()));
}
