fn main() -> std::process::ExitCode {
    rccm_cli::main_exit()
}
