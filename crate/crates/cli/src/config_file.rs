//! `key=value` option files. Each key names a long flag (`max_sweeps` or
//! `max-sweeps`); the pairs are spliced in right after the subcommand so that
//! anything given on the command line later overrides them.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

const SUBCOMMANDS: [&str; 3] = ["generate", "train", "benchmark"];
const PROTOCOLS: [&str; 2] = ["synthetic", "movielens"];

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {line:?}", k + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", k + 1);
        }
        if key == "config" {
            bail!("line {}: config files cannot include other config files", k + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Index just past the subcommand (and protocol, for `benchmark`).
fn insertion_point(args: &[OsString]) -> Option<usize> {
    let pos = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))?;
    if args[pos] == "benchmark" {
        match args.get(pos + 1) {
            Some(p) if PROTOCOLS.contains(&p.to_string_lossy().as_ref()) => Some(pos + 2),
            _ => Some(pos + 1),
        }
    } else {
        Some(pos + 1)
    }
}

/// Returns `args` with the options of the `--config` file, if any, spliced in.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let pairs = parse(&text).with_context(|| format!("in config file {}", path.display()))?;
    let Some(at) = insertion_point(&args) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in pairs {
        match value.as_str() {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            _ => injected.push(format!("--{key}={value}").into()),
        }
    }
    let mut out = args;
    out.splice(at..at, injected);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_and_skips_comments() {
        let p = parse("# x\nmax_sweeps = 5\n\nsolver=als\n").unwrap();
        assert_eq!(p, vec![("max-sweeps".into(), "5".into()), ("solver".into(), "als".into())]);
        assert!(parse("rank 3").is_err());
        assert!(parse("config=a").is_err());
    }

    #[test]
    fn splices_after_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        std::fs::write(&cfg, "rank=4\nsamples=2\n").unwrap();
        let args = os(&["cavmf", "--config", cfg.to_str().unwrap(), "benchmark", "synthetic", "--rank", "6"]);
        let out = expand(args).unwrap();
        let tail: Vec<_> = out[3..].iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(tail, ["benchmark", "synthetic", "--rank=4", "--samples=2", "--rank", "6"]);
    }

    #[test]
    fn untouched_without_config() {
        let args = os(&["cavmf", "train", "--solver", "als"]);
        assert_eq!(expand(args.clone()).unwrap(), args);
    }
}
