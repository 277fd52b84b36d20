//! `--config` files: plain `key = value` lines that fill in flags not given on the command line.

use std::fs;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--out-dir", "--config"];

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push((key, v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn subcommand_position(args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if GLOBAL_VALUE_FLAGS.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn given(args: &[String], flag: &str) -> bool {
    args.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

/// Rewrites `args` so that every config key not already on the command line
/// becomes a flag of the chosen subcommand (or a global flag).
pub fn inject(args: Vec<String>, cli: &Command) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config file {path}"))?;
    let pairs = parse_pairs(&text).map_err(|e| ConfigError(e.to_string()))?;
    let Some(pos) = subcommand_position(&args) else { return Ok(args) };
    let Some(sub) = cli.find_subcommand(&args[pos]) else { return Ok(args) };

    let mut extra_global = Vec::new();
    let mut extra_local = Vec::new();
    for (key, value) in pairs {
        let flag = format!("--{key}");
        if given(&args, &flag) {
            continue;
        }
        if key == "seed" || key == "out-dir" {
            extra_global.extend([flag, value]);
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            return Err(ConfigError(format!("config key `{key}` is not an option of `{}`", sub.get_name())).into());
        };
        match arg.get_action() {
            ArgAction::SetTrue => {
                if value.parse::<bool>().map_err(|_| ConfigError(format!("`{key}` expects true or false")))? {
                    extra_local.push(flag);
                }
            }
            _ => extra_local.extend([flag, value]),
        }
    }
    let mut out = args[..pos].to_vec();
    out.extend(extra_global);
    out.push(args[pos].clone());
    out.extend(extra_local);
    out.extend(args[pos + 1..].iter().cloned());
    Ok(out)
}

/// A malformed or mismatched config file; reported as a validation error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_skip_comments_and_normalize_keys() {
        let p = parse_pairs("# c\n\nfilter_pct = 90\nk=2\n").unwrap();
        assert_eq!(p, vec![("filter-pct".into(), "90".into()), ("k".into(), "2".into())]);
        assert!(parse_pairs("novalue\n").is_err());
    }

    #[test]
    fn finds_subcommand_after_global_values() {
        let a: Vec<String> = ["natlas", "--seed", "3", "--config", "c.txt", "identify", "--k", "1"].map(String::from).to_vec();
        assert_eq!(subcommand_position(&a), Some(5));
        assert_eq!(config_path(&a).as_deref(), Some("c.txt"));
    }
}
