//! Flat `key=value` run configuration.
//!
//! Keys are flag names (`batch-size` or `batch_size`). A key is applied only
//! when the same flag was not given on the command line, so flags override
//! the file. Keys the chosen subcommand does not accept are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command, CommandFactory};

use crate::Cli;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", n + 1));
        }
        if !seen.insert(key.clone()) {
            return Err(format!("config line {}: duplicate key `{key}`", n + 1));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn from_command_line(matches: &ArgMatches, id: &str) -> bool {
    matches!(matches.try_get_raw(id), Ok(Some(_))) && matches.value_source(id) == Some(ValueSource::CommandLine)
}

/// Appends the config file's settings to `argv` for every flag the command
/// line left unset.
pub fn merge(argv: &[String], path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let entries = parse(&text)?;

    let root = Cli::command();
    let matches = root.clone().try_get_matches_from(argv).map_err(|e| e.to_string())?;
    let (name, sub_matches) = matches.subcommand().ok_or("missing subcommand")?;
    let sub: &Command = root.find_subcommand(name).ok_or("unknown subcommand")?;

    let mut merged = argv.to_vec();
    for (key, value) in entries {
        if key == "config" {
            return Err("a config file cannot name another config file".into());
        }
        let (arg, given) = match sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) {
            Some(a) => (a, from_command_line(sub_matches, a.get_id().as_str())),
            None => match root
                .get_arguments()
                .find(|a| a.is_global_set() && a.get_long() == Some(key.as_str()))
            {
                Some(a) => {
                    let id = a.get_id().as_str();
                    (a, from_command_line(&matches, id) || from_command_line(sub_matches, id))
                }
                None => return Err(format!("unknown config key `{key}` for `{name}`")),
            },
        };
        if given {
            continue;
        }
        if arg.get_action().takes_values() {
            merged.push(format!("--{key}={value}"));
        } else {
            let on: bool = value
                .parse()
                .map_err(|_| format!("config key `{key}` expects true or false, got `{value}`"))?;
            if on {
                merged.push(format!("--{key}"));
            }
        }
    }
    Ok(merged)
}
