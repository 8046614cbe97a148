//! `--config <path>`: a flat `key=value` file whose keys mirror flag names.
//!
//! The file's entries are spliced in right after the subcommand, ahead of
//! the flags typed on the command line, so explicit flags win.

use std::ffi::OsString;

use clap::{ArgAction, Command};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got `{line}`", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<(usize, usize, OsString)> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args.get(i + 1).map(|p| (i, 2, p.clone()));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some((i, 1, p.into()));
        }
    }
    None
}

/// Rewrites `args` with the config file's entries expanded into flags.
pub fn expand(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some((at, width, path)) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let entries = parse_kv(&text)?;

    let mut rest: Vec<OsString> = args[..at].iter().chain(&args[at + width..]).cloned().collect();
    let sub_pos = rest
        .iter()
        .position(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()).is_some())
        .ok_or("--config needs a subcommand")?;
    let sub = cmd
        .find_subcommand(rest[sub_pos].to_string_lossy().as_ref())
        .expect("found above");

    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) || (a.is_positional() && a.get_id().as_str() == key.replace('-', "_")))
            .ok_or_else(|| format!("unknown config key `{key}` for `{}`", sub.get_name()))?;
        if arg.is_positional() {
            injected.push(value.into());
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(format!("config key `{key}` takes true or false")),
            },
            ArgAction::Count => {
                let n: usize = value.parse().map_err(|_| format!("config key `{key}` takes a count"))?;
                injected.extend((0..n).map(|_| OsString::from(format!("--{key}"))));
            }
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    let tail = rest.split_off(sub_pos + 1);
    rest.extend(injected);
    rest.extend(tail);
    Ok(rest)
}
