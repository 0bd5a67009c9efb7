use std::process::ExitCode;

use clap::Parser;
use s3im_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<s3im_core::Error>().map_or(2, |c| c.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    init_threads()?;
    let cfg = cli.resolve()?;
    for path in run(cli.command, &cfg)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
