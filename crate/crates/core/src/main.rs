use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut stdout = std::io::stdout().lock();
    let code = npvae::cli::main_with_args(std::env::args_os(), &mut stdout);
    ExitCode::from(code as u8)
}
