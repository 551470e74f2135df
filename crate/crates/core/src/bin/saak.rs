fn main() -> std::process::ExitCode {
    saak::cli::main()
}
