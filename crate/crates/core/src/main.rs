fn main() -> std::process::ExitCode {
    scene_retrieval::cli::main_with_args(std::env::args_os())
}
