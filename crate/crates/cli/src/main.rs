fn main() {
    std::process::exit(mtcnn_cli::main_with_args(std::env::args_os()));
}
