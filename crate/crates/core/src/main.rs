fn main() -> std::process::ExitCode {
    vsrprune::cli::main()
}
