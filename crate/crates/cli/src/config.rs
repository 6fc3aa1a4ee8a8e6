//! `key=value` configuration files merged under command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {raw:?}", n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

/// Config entries as flags. `true` turns a switch on, `false` leaves it out.
fn as_flags(pairs: &[(String, String)]) -> Vec<String> {
    let mut flags = Vec::new();
    for (key, value) in pairs {
        match value.as_str() {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => flags.push(format!("--{key}={value}")),
        }
    }
    flags
}

/// Removes `--config FILE` from `args` and splices the file's entries in
/// right after the subcommand name, so that flags typed later win.
pub fn expand(args: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        if arg == "--config" {
            path = Some(iter.next().context("--config needs a file path")?);
        } else if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let flags = as_flags(&parse(&text).with_context(|| format!("in config {path}"))?);
    let Some(pos) = rest.iter().position(|a| subcommands.contains(&a.as_str())) else {
        return Ok(rest);
    };
    rest.splice(pos + 1..pos + 1, flags);
    Ok(rest)
}
