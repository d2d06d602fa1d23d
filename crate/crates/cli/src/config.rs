//! `--config <file>` support.
//!
//! The file is TOML. Top-level `seed` and `threads` set the common flags;
//! a table named after a subcommand (`[sweep]`, `[fewshot.build]`) sets that
//! subcommand's flags, with `_` in keys read as `-`. The values become flags
//! placed before the user's own arguments; a flag the user also gives on the
//! command line is not injected. `threads` from the file is ignored when `SUBSPACE_PROBE_THREADS`
//! is set.

use toml::{Table, Value};

pub const THREADS_ENV: &str = "SUBSPACE_PROBE_THREADS";

const VALUE_GLOBALS: [&str; 3] = ["--seed", "--threads", "--config"];
const NESTED: [&str; 1] = ["fewshot"];

fn take_config(args: &mut Vec<String>) -> Result<Option<String>, String> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err("--config needs a file path".into());
            }
            found = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(path) = args[i].strip_prefix("--config=") {
            found = Some(path.to_string());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

fn flag_value(v: &Value) -> Result<Option<String>, String> {
    Ok(match v {
        Value::String(s) => Some(s.clone()),
        Value::Integer(i) => Some(i.to_string()),
        Value::Float(f) => Some(f.to_string()),
        Value::Boolean(_) => None,
        Value::Array(items) => {
            let parts: Result<Vec<String>, String> = items
                .iter()
                .map(|i| flag_value(i)?.ok_or_else(|| "arrays of booleans are not supported".to_string()))
                .collect();
            Some(parts?.join(","))
        }
        other => return Err(format!("unsupported config value {other}")),
    })
}

fn push_flags(out: &mut Vec<String>, table: &Table, skip_tables: bool) -> Result<(), String> {
    for (key, value) in table {
        if value.is_table() {
            if skip_tables {
                continue;
            }
            return Err(format!("unexpected nested table [{key}]"));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match (value, flag_value(value)?) {
            (Value::Boolean(true), _) => out.push(flag),
            (Value::Boolean(false), _) => {}
            (_, Some(v)) => out.push(format!("{flag}={v}")),
            (_, None) => {}
        }
    }
    Ok(())
}

/// Returns `args` with the config file's settings spliced in after the
/// subcommand path.
pub fn expand(mut args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = take_config(&mut args)? else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let table: Table = text.parse().map_err(|e| format!("{path}: {e}"))?;

    let mut i = 1;
    while i < args.len() && args[i].starts_with('-') {
        i += if VALUE_GLOBALS.contains(&args[i].as_str()) { 2 } else { 1 };
    }
    let mut path_parts = Vec::new();
    if i < args.len() {
        path_parts.push(args[i].clone());
        i += 1;
        if NESTED.contains(&path_parts[0].as_str()) && i < args.len() && !args[i].starts_with('-') {
            path_parts.push(args[i].clone());
            i += 1;
        }
    }

    let mut injected = Vec::new();
    for (key, value) in &table {
        match key.as_str() {
            "seed" => injected.push(format!("--seed={}", flag_value(value)?.unwrap_or_default())),
            "threads" if std::env::var_os(THREADS_ENV).is_none() => {
                injected.push(format!("--threads={}", flag_value(value)?.unwrap_or_default()))
            }
            "threads" => {}
            _ if value.is_table() => {}
            other => return Err(format!("{path}: unknown top-level key {other:?}")),
        }
    }
    let mut section = Some(&table);
    for part in &path_parts {
        section = section.and_then(|t| t.get(part)).and_then(Value::as_table);
    }
    if let Some(section) = section.filter(|_| !path_parts.is_empty()) {
        push_flags(&mut injected, section, path_parts.len() == 1 && NESTED.contains(&path_parts[0].as_str()))?;
    }
    let given: Vec<&str> = args[1..].iter().filter_map(|a| a.strip_prefix("--")).map(|a| a.split('=').next().unwrap_or(a)).collect();
    injected.retain(|flag| {
        let name = flag.trim_start_matches("--");
        !given.contains(&name.split('=').next().unwrap_or(name))
    });
    let tail = args.split_off(i);
    args.extend(injected);
    args.extend(tail);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn splices_section_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "seed = 4\n[fewshot.build]\nshots = [0, 2]\nattr = \"area\"\n[sweep]\nno_split = true\n").unwrap();
        let line = format!("p fewshot build --config {} --n 5", cfg.display());
        let out = expand(args(&line)).unwrap();
        assert_eq!(out, args("p fewshot build --seed=4 --attr=area --shots=0,2 --n 5"));
        let line = format!("p --config={} sweep --attr a", cfg.display());
        assert_eq!(expand(args(&line)).unwrap(), args("p sweep --seed=4 --no-split --attr a"));
        let line = format!("p fewshot build --config {} --shots 8 --seed 1", cfg.display());
        assert_eq!(expand(args(&line)).unwrap(), args("p fewshot build --attr=area --shots 8 --seed 1"));
    }

    #[test]
    fn unknown_top_level_key() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "colour = 1\n").unwrap();
        assert!(expand(args(&format!("p validate --config {}", cfg.display()))).is_err());
    }
}
