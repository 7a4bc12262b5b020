fn main() {
    std::process::exit(lambda_maml_cli::run(std::env::args_os()));
}
