//! `key=value` config files, expanded into flags placed right after the
//! subcommand so that flags given on the command line override them.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;
use crate::CliError;

/// Parses a config file into `(key, value)` pairs. Keys use the flag spelling
/// without the leading dashes; `_` and `-` are interchangeable.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", no + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", no + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into argv tokens for `subcommand`, rejecting keys that
/// are not flags of that subcommand.
pub fn to_flags(subcommand: &str, entries: &[(String, String)]) -> Result<Vec<OsString>, CliError> {
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(subcommand)
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {subcommand:?}")))?;
    let mut out = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?} for {subcommand}")))?;
        let is_switch = matches!(arg.get_action(), clap::ArgAction::SetTrue);
        if is_switch {
            match value.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(CliError::Usage(format!("config key {key:?} expects true or false, got {other:?}")));
                }
            }
        } else {
            out.push(format!("--{key}").into());
            out.push(value.into());
        }
    }
    Ok(out)
}

/// Expands every `--config FILE` (or `--config=FILE`) in `argv`.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(argv);
    };
    let sub_pos = sub_pos + 1;
    let subcommand = argv[sub_pos].to_string_lossy().into_owned();
    let mut files = Vec::new();
    let mut i = sub_pos + 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--config" {
            if let Some(f) = argv.get(i + 1) {
                files.push(f.clone());
            }
            i += 2;
            continue;
        }
        if let Some(f) = a.strip_prefix("--config=") {
            files.push(f.into());
        }
        i += 1;
    }
    if files.is_empty() {
        return Ok(argv);
    }
    let mut injected = Vec::new();
    for f in files {
        let text = fs::read_to_string(Path::new(&f))
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", Path::new(&f).display())))?;
        injected.extend(to_flags(&subcommand, &parse(&text)?)?);
    }
    let mut out = argv[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend(argv[sub_pos + 1..].iter().cloned());
    Ok(out)
}
