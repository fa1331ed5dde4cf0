fn main() -> std::process::ExitCode {
    distctl::cli::run(std::env::args_os())
}
