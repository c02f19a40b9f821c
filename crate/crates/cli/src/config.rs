//! Flat key-value run configuration. Precedence: command-line flags
//! override file entries, file entries override built-in defaults. Every
//! run writes the fully resolved set back into its output directory, so
//! the snapshot alone can reproduce the run.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const OUT_ROOT_ENV: &str = "USIQA_OUT_ROOT";

/// `key = value` per line; `#` starts a comment; blank lines ignored.
pub fn parse_kv_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {path:?}"))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{path:?}:{}: expected `key = value`, got {raw:?}", lineno + 1);
        };
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

/// Resolves options against the file layer and records the final values.
pub struct Resolver {
    file: HashMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(config_path: Option<&Path>) -> Result<Self> {
        let file = match config_path {
            Some(p) => parse_kv_file(p)?,
            None => HashMap::new(),
        };
        Ok(Resolver { file, resolved: Vec::new() })
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.push((key.to_owned(), value.to_string()));
    }

    /// flag > file > default.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw
                    .parse::<T>()
                    .map_err(|e| anyhow::anyhow!("config key {key} = {raw:?}: {e}"))?,
                None => default,
            },
        };
        self.record(key, &value);
        Ok(value)
    }

    /// Boolean switch: a bare `--flag` wins; otherwise the file value.
    pub fn get_flag(&mut self, key: &str, flag: bool, default: bool) -> Result<bool> {
        let value = if flag {
            true
        } else {
            match self.file.get(key) {
                Some(raw) => raw
                    .parse::<bool>()
                    .map_err(|e| anyhow::anyhow!("config key {key} = {raw:?}: {e}"))?,
                None => default,
            }
        };
        self.record(key, value);
        Ok(value)
    }

    /// Write the resolved snapshot into the run's output directory.
    pub fn write_snapshot(&self, out_dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let mut text = format!("command = {command}\n");
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(out_dir.join("config_resolved.txt"), text)?;
        Ok(())
    }
}

/// Default output directory: `$USIQA_OUT_ROOT/<name>` or `./<name>`.
pub fn default_out(name: &str) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from(name),
    }
}

/// "0.70,0.10,0.20" -> (0.70, 0.10, 0.20)
pub fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        bail!("ratios must be three comma-separated numbers, got {s:?}");
    }
    let v: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("ratio {p:?}: {e}")))
        .collect::<Result<_>>()?;
    Ok((v[0], v[1], v[2]))
}
