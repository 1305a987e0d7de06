//! `--config FILE` support.
//!
//! The file holds `key=value` lines whose keys are long flag names of the
//! chosen subcommand (`-` and `_` are interchangeable). Its entries are
//! spliced into argv ahead of the user's own flags; every subcommand
//! overrides repeated flags with the last occurrence, so explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::Command;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value, got `{line}`", path.display(), no + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Removes `--config FILE` from `args` and returns the path, if present.
fn take_config_flag(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--" {
            break;
        }
        if a == "--config" {
            if i + 1 >= args.len() {
                bail!("--config requires a file path");
            }
            let v = args.remove(i + 1);
            args.remove(i);
            return Ok(Some(v));
        }
        if let Some(v) = a.strip_prefix("--config=") {
            let v = OsString::from(v);
            args.remove(i);
            return Ok(Some(v));
        }
        i += 1;
    }
    Ok(None)
}

/// Rewrites argv so the entries of `--config FILE` precede explicit flags.
pub fn expand(mut args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>> {
    let Some(path) = take_config_flag(&mut args)? else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = parse_kv(&text, path)?;

    let sub_pos = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
        .ok_or_else(|| anyhow!("--config needs a subcommand"))?;
    let sub_name = args[sub_pos].to_string_lossy().into_owned();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| anyhow!("unknown subcommand `{sub_name}`"))?;

    let mut injected = Vec::new();
    for (key, value) in pairs {
        if key == "config" {
            bail!("{}: nested config files are not supported", path.display());
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow!("{}: unknown key `{key}` for `{sub_name}`", path.display()))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                other => bail!("{}: `{key}` is a switch, expected true or false, got `{other}`", path.display()),
            }
        }
    }
    let tail = args.split_off(sub_pos + 1);
    args.extend(injected);
    args.extend(tail);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_skips_comments() {
        let kv = parse_kv("# c\n\nlr = 0.01\nbatch_size=4\n", Path::new("x")).unwrap();
        assert_eq!(kv, vec![("lr".into(), "0.01".into()), ("batch-size".into(), "4".into())]);
        assert!(parse_kv("lr\n", Path::new("x")).is_err());
    }

    #[test]
    fn config_flag_is_removed_in_both_spellings() {
        let mut a: Vec<OsString> = ["mlnet", "train", "--config", "f", "--lr", "1"].map(Into::into).to_vec();
        assert_eq!(take_config_flag(&mut a).unwrap(), Some("f".into()));
        assert_eq!(a.len(), 4);
        let mut b: Vec<OsString> = ["mlnet", "train", "--config=g"].map(Into::into).to_vec();
        assert_eq!(take_config_flag(&mut b).unwrap(), Some("g".into()));
        assert_eq!(b.len(), 2);
    }
}
