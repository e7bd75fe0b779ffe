fn main() -> std::process::ExitCode {
    midterm::cli::run(std::env::args_os())
}
