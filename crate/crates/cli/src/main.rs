use std::process::ExitCode;

fn main() -> ExitCode {
    match absa_cli::commands::run(std::env::args_os(), std::env::vars().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                if !clap_err.use_stderr() {
                    return ExitCode::SUCCESS;
                }
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(absa_cli::commands::exit_code(&err) as u8)
        }
    }
}
