//! `--config file.json`: a flat object of flag names to values, optionally
//! with a nested object per subcommand. File values are spliced in right
//! after the subcommand, so anything given on the command line wins.

use std::ffi::OsString;
use std::path::Path;

use serde_json::{Map, Value};

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn flags_from(obj: &Map<String, Value>, out: &mut Vec<OsString>) -> Result<(), String> {
    for (key, value) in obj {
        // Subcommand sections are handled by the caller.
        if value.is_object() {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        let scalars = match value {
            Value::Array(items) => items.clone(),
            v => vec![v.clone()],
        };
        for v in scalars {
            match v {
                Value::Bool(true) => out.push(flag.clone().into()),
                Value::Bool(false) | Value::Null => {}
                Value::String(s) => out.push(format!("{flag}={s}").into()),
                Value::Number(n) => out.push(format!("{flag}={n}").into()),
                _ => return Err(format!("config key `{key}` has an unsupported value")),
            }
        }
    }
    Ok(())
}

/// Index of the subcommand in `argv`, skipping global options.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == "--config" {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
    let Value::Object(obj) = root else {
        return Err(format!("config {} must hold a JSON object", path.display()));
    };
    let Some(at) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let sub = argv[at].to_string_lossy().into_owned();
    let mut injected = Vec::new();
    flags_from(&obj, &mut injected)?;
    if let Some(Value::Object(section)) = obj.get(&sub) {
        flags_from(section, &mut injected)?;
    }
    let mut out = argv[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn file_flags_land_before_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(
            &cfg,
            r#"{"lr": 0.5, "unfreeze": true, "l2": null, "train": {"batch_size": 8}, "sweep": {"workers": 3}}"#,
        )
        .unwrap();
        let argv = args(&["defectlab", "--config", cfg.to_str().unwrap(), "train", "--lr", "0.1"]);
        let out = expand(argv).unwrap();
        let out: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(
            out[3..],
            ["train", "--lr=0.5", "--unfreeze", "--batch-size=8", "--lr", "0.1"]
        );
    }

    #[test]
    fn without_config_argv_is_untouched() {
        let argv = args(&["defectlab", "scan", "--root", "x"]);
        assert_eq!(expand(argv.clone()).unwrap(), argv);
    }

    #[test]
    fn bad_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, "[1]").unwrap();
        let argv = args(&["defectlab", "--config", cfg.to_str().unwrap(), "scan"]);
        assert!(expand(argv).unwrap_err().contains("JSON object"));
        let argv = args(&["defectlab", "--config", "/nonexistent.json", "scan"]);
        assert!(expand(argv).is_err());
    }
}
