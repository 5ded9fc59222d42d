mod args;
mod run;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Environment variable fixing the worker-thread count.
const WORKERS_ENV: &str = "ATTR_WORKERS";

fn configure_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("{WORKERS_ENV} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    configure_workers()?;
    let (opts, output) = match cli.command {
        Command::Synth(s) => return run::synth(&s),
        Command::Retro(o) => (o.clone(), run::retro(&o)?),
        Command::Rankshap(o) => (o.clone(), run::rankshap_cmd(&o)?),
        Command::Sprt(o) => (o.clone(), run::sprt_cmd(&o)?),
        Command::Slime(o) => (o.clone(), run::slime_cmd(&o)?),
        Command::Global(o) => (o.clone(), run::global_cmd(&o)?),
        Command::Experiment(o) => (o.clone(), run::experiment_cmd(&o)?),
    };
    run::emit(opts.out.as_deref(), &output)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
