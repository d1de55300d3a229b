//! The `lore` command-line tool as a library, so tests can drive it
//! in-process.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod log;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use crate::args::{out_from_env, resolve, Cli};
use crate::config::Subcommand;
use crate::error::{exit_code, EXIT_OK, EXIT_USAGE};

fn fail(cmd: &str, err: &anyhow::Error) -> i32 {
    let code = exit_code(err);
    let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
    log::log(cmd, "error", json!({"exit_code": code, "error": chain}));
    eprintln!("error: {err:#}");
    code
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let name = cli.command.subcommand().name();
    let cfg = match resolve(&cli.command, out_from_env()) {
        Ok(cfg) => cfg,
        Err(e) => return fail(name, &e),
    };
    if let Some(path) = &cli.command.common().dump_config {
        let text = match cfg.to_json() {
            Ok(t) => t,
            Err(e) => return fail(name, &e),
        };
        if path.as_os_str() == "-" {
            print!("{text}");
        } else if let Err(e) = std::fs::write(path, text) {
            return fail(name, &anyhow::Error::new(e).context(format!("writing {}", path.display())));
        }
        return EXIT_OK;
    }
    log::log(name, "config", json!({ "config": lore_bench::bench::json_value(&cfg).unwrap_or_default() }));
    let threads = if cfg.subcommand == Subcommand::Bench { cfg.jobs } else { 1 };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return fail(name, &anyhow::anyhow!("thread pool: {e}")),
    };
    match pool.install(|| commands::execute(&cfg)) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => fail(name, &e),
    }
}
