// NaN must fail flag validation, hence `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, SecondsFormat, Utc};
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde_json::json;
use sha2::{Digest, Sha256};

use args::Cli;
use commands::{CliError, Outcome};

const USAGE_EXIT: u8 = 2;
const DATA_EXIT: u8 = 1;

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE_EXIT)
        }
        Err(CliError::Data(e)) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::from(DATA_EXIT)
        }
    }
}

fn real_main() -> Result<(), CliError> {
    let argv = expand_config(std::env::args().collect())?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            std::process::exit(e.exit_code());
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    configure_threads()?;

    let (outcome, output) = commands::run(&cli.command)?;
    let (path, leaf) = command_path(&matches);
    match &output.out {
        Some(out) => {
            if let Some(csv) = &outcome.csv {
                fs::write(out, csv)?;
            }
            write_manifest(out, &path, leaf, &outcome)?;
            print!("{}", outcome.summary);
        }
        None if outcome.csv_on_stdout => {
            print!("{}", outcome.csv.as_deref().unwrap_or_default());
            eprint!("{}", outcome.summary);
        }
        None => print!("{}", outcome.summary),
    }
    io::stdout().flush()?;
    Ok(())
}

/// Splices `key = value` lines from a `--config` file in front of the
/// explicit flags, so that flags given on the command line win.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let config = argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(config) = config else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&config)?;
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{config}:{}: expected `key = value`", lineno + 1))
        })?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => tokens.push(flag),
            "false" => {}
            v => {
                tokens.push(flag);
                tokens.push(v.to_string());
            }
        }
    }
    let at = argv
        .iter()
        .skip(1)
        .position(|a| a.starts_with('-'))
        .map_or(argv.len(), |p| p + 1);
    argv.splice(at..at, tokens);
    Ok(argv)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("GRADVAL_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "GRADVAL_THREADS must be a non-negative integer, got `{raw}`"
        ))
    })?;
    if threads > 0 {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(())
}

fn command_path(matches: &ArgMatches) -> (String, &ArgMatches) {
    let mut names = Vec::new();
    let mut leaf = matches;
    while let Some((name, sub)) = leaf.subcommand() {
        names.push(name.to_string());
        leaf = sub;
    }
    (names.join(" "), leaf)
}

fn resolved_config(command: &str, leaf: &ArgMatches) -> BTreeMap<String, String> {
    let mut def = Cli::command();
    for name in command.split_whitespace() {
        def = def
            .find_subcommand(name)
            .expect("parsed subcommand exists")
            .clone();
    }
    let args: Vec<String> = def
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .collect();
    let mut out = BTreeMap::new();
    for id in leaf
        .ids()
        .filter(|id| args.iter().any(|a| a == id.as_str()))
    {
        if let Ok(Some(values)) = leaf.try_get_raw(id.as_str()) {
            let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            out.insert(id.as_str().to_string(), joined.join(","));
        }
    }
    out
}

fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Honours `SOURCE_DATE_EPOCH` so manifests can be reproduced too.
fn timestamp() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(
    out: &Path,
    command: &str,
    leaf: &ArgMatches,
    outcome: &Outcome,
) -> Result<(), CliError> {
    let mut inputs = BTreeMap::new();
    for path in &outcome.inputs {
        inputs.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = json!({
        "command": command,
        "config": resolved_config(command, leaf),
        "inputs": inputs,
        "seed": outcome.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp": timestamp(),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path(out), text + "\n")?;
    Ok(())
}
