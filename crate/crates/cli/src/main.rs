fn main() {
    std::process::exit(mayer_sens_cli::main_with_args(std::env::args_os()));
}
