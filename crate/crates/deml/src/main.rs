fn main() -> std::process::ExitCode {
    deml::cli::main()
}
