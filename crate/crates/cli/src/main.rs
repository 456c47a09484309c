use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RESYN_LOG", "info")).init();
    let env: Vec<(String, String)> = std::env::vars().collect();
    match resyn_cli::run(std::env::args_os(), &env) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(resyn_cli::error::exit_code(&e) as u8)
        }
    }
}
