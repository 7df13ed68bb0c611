fn main() -> std::process::ExitCode {
    scaledsgd::cli::main()
}
