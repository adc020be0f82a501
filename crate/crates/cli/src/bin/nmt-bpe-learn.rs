fn main() -> std::process::ExitCode {
    nmtkit_cli::main_for(Some("bpe-learn"))
}
