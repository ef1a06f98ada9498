//! `key=value` config files. Entries become `--key=value` flags for the
//! chosen subcommand unless that flag was already given on the command line.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;

use crate::error::CliError;

pub fn parse(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Usage(format!("config line {}: invalid key {key:?}", lineno + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Rebuilds `argv` with config entries inserted right after the subcommand
/// name, skipping keys the user set explicitly.
pub fn merge(argv: &[OsString], path: &Path, sub: &str, matches: &ArgMatches) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse(&text)?;
    let mut extra = Vec::new();
    for (key, value) in entries {
        let id = key.replace('-', "_");
        let explicit = matches
            .try_get_raw(&id)
            .ok()
            .flatten()
            .is_some()
            && matches.value_source(&id) == Some(ValueSource::CommandLine);
        if !explicit {
            extra.push(OsString::from(format!("--{key}={value}")));
        }
    }
    let pos = argv
        .iter()
        .position(|a| a == sub)
        .ok_or_else(|| CliError::Usage(format!("subcommand {sub} not found in arguments")))?;
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalises_keys() {
        let got = parse("# run\nepochs = 3\n\nbatch_size=8\n").unwrap();
        assert_eq!(got, vec![("epochs".into(), "3".into()), ("batch-size".into(), "8".into())]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse("epochs 3").is_err());
        assert!(parse("=3").is_err());
    }
}
