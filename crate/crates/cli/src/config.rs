//! `--config <path>` support: a `key=value` file whose keys are flag names.

use std::ffi::OsString;
use std::path::Path;

/// Turn the file contents into flags. Blank lines and `#` comments are
/// skipped; `flag=true` becomes a bare `--flag` and `flag=false` is dropped.
pub fn parse(text: &str) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got {raw:?}", i + 1))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: bad key {k:?}", i + 1));
        }
        match v.trim() {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Splice flags from every `--config <path>` (or `--config=<path>`) right
/// after the subcommand, so flags given on the command line win.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut files = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let p = it.next().ok_or("--config needs a path")?;
            files.push(p);
        } else if let Some(p) = s.strip_prefix("--config=") {
            files.push(p.into());
        } else {
            rest.push(a);
        }
    }
    if files.is_empty() {
        return Ok(rest);
    }
    let mut injected = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(Path::new(&f))
            .map_err(|e| format!("cannot read config {}: {e}", Path::new(&f).display()))?;
        injected.extend(parse(&text)?);
    }
    // Program name, then the subcommand (first non-flag argument).
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'));
    let at = sub.map_or(rest.len(), |p| p + 2);
    rest.splice(at..at, injected);
    Ok(rest)
}
