//! Layered run configuration. Values come from three places, weakest first:
//! built-in defaults, a flat key-value config file with `[section]` headers,
//! and command-line flags. Every key a command actually consults is recorded
//! with its final value, and the full resolved set is written next to the
//! run's outputs so the run can be reproduced from that file alone.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation, configuration, or input selection: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work (I/O, non-finite loss, corrupt
    /// artifacts): exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Key-value store with section-qualified keys (`section.key`) and a record
/// of every key consulted.
#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        let Some(path) = path else { return Ok(cfg) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{}:{}: expected `key = value` or `[section]`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            cfg.values.insert(full, value.trim().to_string());
        }
        Ok(cfg)
    }

    /// Flag overlay: flags beat file values.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    fn record(&self, key: &str, value: &str) {
        self.used
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self
            .values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        v
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.values.get(key) {
            Some(raw) => {
                let v: T = raw
                    .parse()
                    .map_err(|e| usage(format!("config key {key}: {e} (got `{raw}`)")))?;
                self.record(key, &v.to_string());
                Ok(v)
            }
            None => {
                self.record(key, &default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.values.get(key).map(String::as_str) {
            Some("true") | Some("1") => {
                self.record(key, "true");
                Ok(true)
            }
            Some("false") | Some("0") => {
                self.record(key, "false");
                Ok(false)
            }
            Some(other) => Err(usage(format!(
                "config key {key}: expected true/false, got `{other}`"
            ))),
            None => {
                self.record(key, if default { "true" } else { "false" });
                Ok(default)
            }
        }
    }

    pub fn get_f32_list(&self, key: &str, default: &[f32]) -> Result<Vec<f32>, CliError> {
        let parsed = match self.values.get(key) {
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f32>()
                        .map_err(|e| usage(format!("config key {key}: {e} (got `{s}`)")))
                })
                .collect::<Result<Vec<f32>, CliError>>()?,
            None => default.to_vec(),
        };
        let canonical: Vec<String> = parsed.iter().map(|v| v.to_string()).collect();
        self.record(key, &canonical.join(","));
        Ok(parsed)
    }

    /// Optional value with no default (input paths and the like).
    pub fn get_opt(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if let Some(ref v) = v {
            self.record(key, v);
        }
        v
    }

    pub fn require_str(&self, key: &str, hint: &str) -> Result<String, CliError> {
        self.get_opt(key)
            .ok_or_else(|| usage(format!("missing required setting {key} ({hint})")))
    }

    /// Serialize every consulted key, grouped into sections, in a form
    /// `Config::from_file` reads back identically.
    pub fn resolved_text(&self) -> String {
        let used = self.used.borrow();
        let mut out = String::new();
        let mut current = None::<String>;
        for (key, value) in used.iter() {
            let (section, name) = match key.split_once('.') {
                Some((s, n)) => (s.to_string(), n),
                None => (String::new(), key.as_str()),
            };
            if current.as_ref() != Some(&section) {
                if current.is_some() {
                    out.push('\n');
                }
                if !section.is_empty() {
                    out.push_str(&format!("[{section}]\n"));
                }
                current = Some(section);
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let path = dir.join(format!("resolved-{command}.cfg"));
        std::fs::write(&path, self.resolved_text())
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }
}
