fn main() {
    std::process::exit(tmbench_cli::run(std::env::args_os()));
}
