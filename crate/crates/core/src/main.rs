use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let env_params = std::env::var_os(meshnoc::cli::PARAMS_ENV).map(PathBuf::from);
    let code = meshnoc::cli::run(
        std::env::args_os(),
        env_params,
        &mut io::stdout().lock(),
        &mut io::stderr().lock(),
    );
    ExitCode::from(code as u8)
}
