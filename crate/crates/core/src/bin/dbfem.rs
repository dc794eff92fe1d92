fn main() -> std::process::ExitCode {
    dbfem::cli::main()
}
