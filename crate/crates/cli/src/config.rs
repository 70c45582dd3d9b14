//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Every known key has a default, so the resolved configuration written
//! beside each run's outputs lists the complete set of values used.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// `(section, key, default)` for every accepted key.
const KEYS: &[(&str, &str, &str)] = &[
    ("run", "seed", "0"),
    ("data", "corpus", ""),
    ("data", "procedural", "2000"),
    ("data", "size", "300"),
    ("data", "seed", "1"),
    ("data", "gamma", "gamma1"),
    ("cascade", "blocks", "PS"),
    ("cascade", "estimator", "lk"),
    ("cascade", "model", ""),
    ("loss", "loss", "supervised"),
    ("train", "lr", "1e-4"),
    ("train", "batch", "32"),
    ("train", "epochs", "100"),
    ("train", "patience", "5"),
    ("train", "widths", "small"),
    ("train", "input", "gray"),
    ("train", "val_fraction", "0.1"),
    ("train", "teacher", ""),
    ("train", "mode", "distill"),
    ("train", "lambdas", "1,1,0.1"),
    ("train", "student_widths", "4,8,8,4"),
    ("bench", "n", "500"),
    ("bench", "gammas", "gamma1,gamma2"),
    ("bench", "estimators", "identity,lk"),
    ("bench", "timing", "false"),
    ("sim", "shape", "circle"),
    ("sim", "size", "default"),
    ("sim", "duration", "60"),
    ("sim", "altitude", "2"),
    ("sim", "altitude_amplitude", "0.3"),
    ("sim", "noise", "default"),
    ("sim", "alt_sigma", "0.02"),
    ("sim", "m_per_px", "0.002"),
    ("sim", "width", "640"),
    ("sim", "height", "480"),
    ("sim", "fov_deg", "22"),
    ("sim", "frame_every", "1"),
    ("fuse", "stride", "4"),
    ("fuse", "patch", "128"),
    ("fuse", "beta", "0.1"),
    ("fuse", "motion_prior", "true"),
    ("fuse", "max_speed", "6"),
];

/// Keys holding file system paths, resolved against the config file's
/// directory.
const PATH_KEYS: &[(&str, &str)] = &[("data", "corpus"), ("cascade", "model"), ("train", "teacher")];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(s, k, v)| ((s.to_string(), k.to_string()), v.to_string()))
                .collect(),
        }
    }
}

fn is_path_key(section: &str, key: &str) -> bool {
    PATH_KEYS.iter().any(|(s, k)| *s == section && *k == key)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::default();
        cfg.merge_text(&text, base)
            .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        Ok(cfg)
    }

    /// Applies `text` on top of the current values. Relative paths are
    /// joined onto `base`.
    pub fn merge_text(&mut self, text: &str, base: &Path) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {lineno}: unterminated section header `{line}`")))?
                    .trim();
                if !KEYS.iter().any(|(s, _, _)| *s == name) {
                    return Err(ConfigError(format!("line {lineno}: unknown section `[{name}]`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {lineno}: expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            let (sec, key) = match key.split_once('.') {
                Some((s, k)) if section.is_empty() => (s.to_string(), k.to_string()),
                _ if section.is_empty() => {
                    return Err(ConfigError(format!("line {lineno}: key `{key}` is outside any section")))
                }
                _ => (section.clone(), key.to_string()),
            };
            self.set_resolved(&sec, &key, value.trim(), base)
                .map_err(|e| ConfigError(format!("line {lineno}: {}", e.0)))?;
        }
        Ok(())
    }

    /// Sets `section.key` from a command-line override. Paths stay
    /// relative to the working directory.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_resolved(section, key, value, Path::new(""))
    }

    /// Parses `section.key=value`.
    pub fn apply_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let (name, value) = text
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{text}` must look like section.key=value")))?;
        let (section, key) = name
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError(format!("override key `{}` must look like section.key", name.trim())))?;
        self.set(section, key, value.trim())
    }

    fn set_resolved(&mut self, section: &str, key: &str, value: &str, base: &Path) -> Result<(), ConfigError> {
        let slot = self
            .values
            .get_mut(&(section.to_string(), key.to_string()))
            .ok_or_else(|| ConfigError(format!("unknown config key `{section}.{key}`")))?;
        *slot = if is_path_key(section, key) && !value.is_empty() && Path::new(value).is_relative() {
            base.join(value).to_string_lossy().into_owned()
        } else {
            value.to_string()
        };
        Ok(())
    }

    pub fn str(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {section}.{key} is not declared"))
    }

    pub fn parse<T: FromStr>(&self, section: &str, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(section, key);
        raw.parse()
            .map_err(|e| ConfigError(format!("config key `{section}.{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn bool(&self, section: &str, key: &str) -> Result<bool, ConfigError> {
        match self.str(section, key) {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            other => Err(ConfigError(format!("config key `{section}.{key}`: `{other}` is not a boolean"))),
        }
    }

    pub fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        let v = self.str(section, key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Comma-separated list, each entry parsed.
    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(section, key);
        raw.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse()
                    .map_err(|e| ConfigError(format!("config key `{section}.{key}`: cannot parse `{v}`: {e}")))
            })
            .collect()
    }

    /// The full configuration in the same grammar it is read in.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, _) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {}", self.str(section, key));
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #") {
        Some(i) => &line[..i],
        None => line,
    }
}
