use uniseg::cli::{run, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(std::env::args_os()) {
        Ok(()) => {}
        Err(CliError::Usage(e)) => e.exit(),
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
