fn main() -> std::process::ExitCode {
    ties::cli::main_entry()
}
