//! Plain-text `key=value` configuration and run manifests.
//!
//! Each setting is resolved as flag, then config file, then built-in default.
//! The resolved values are written back out as a manifest, which is itself a
//! valid config file for the same command. Relative paths inside a config
//! file are taken relative to the file's own directory, and manifests store
//! paths relative to where they are written, so a manifest stays valid when
//! its directory moves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use jezsl_core::Error;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone)]
enum Value {
    Text(String),
    Path(PathBuf),
    Missing,
}

#[derive(Debug)]
pub struct Settings {
    command: &'static str,
    file: BTreeMap<String, String>,
    origin: Option<PathBuf>,
    used: BTreeSet<String>,
    resolved: Vec<(&'static str, Value)>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("{}:{}: expected key=value, got {line:?}", origin.display(), n + 1)));
        };
        let key = k.trim().replace('-', "_");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(usage(format!("{}:{}: duplicate key {key}", origin.display(), n + 1)));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new(command: &'static str, config: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        let mut origin = None;
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            file = parse_config(&text, path)?;
            if let Some(c) = file.remove("command") {
                if c != command {
                    return Err(usage(format!(
                        "{} was written for `{c}`, not `{command}`",
                        path.display()
                    )));
                }
            }
            if let Some(v) = file.remove("version") {
                if v != env!("CARGO_PKG_VERSION") {
                    log::warn!("{} comes from version {v}", path.display());
                }
            }
            origin = Some(path.parent().unwrap_or(Path::new("")).to_path_buf());
        }
        Ok(Self {
            command,
            file,
            origin,
            used: BTreeSet::new(),
            resolved: Vec::new(),
        })
    }

    fn take_from_file(&mut self, key: &'static str) -> Option<String> {
        self.used.insert(key.to_string());
        self.file.get(key).cloned()
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        raw.parse()
            .map_err(|e| usage(format!("config value {key}={raw:?} is invalid: {e}")))
    }

    pub fn value<T>(&mut self, key: &'static str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.take_from_file(key);
        let v = match (flag, from_file) {
            (Some(v), _) => v,
            (None, Some(raw)) => self.parse(key, &raw)?,
            (None, None) => default,
        };
        self.resolved.push((key, Value::Text(v.to_string())));
        Ok(v)
    }

    pub fn optional_path(&mut self, key: &'static str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let from_file = self.take_from_file(key).filter(|s| !s.is_empty());
        let v = match (flag, from_file) {
            (Some(p), _) => Some(p),
            (None, Some(raw)) => {
                let p = PathBuf::from(raw);
                Some(match &self.origin {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p,
                })
            }
            (None, None) => None,
        };
        self.resolved
            .push((key, v.clone().map_or(Value::Missing, Value::Path)));
        Ok(v)
    }

    pub fn path(&mut self, key: &'static str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.optional_path(key, flag)?.ok_or_else(|| {
            usage(format!(
                "`{}` needs --{} (or `{key}=` in the config file)",
                self.command,
                key.replace('_', "-")
            ))
        })
    }

    pub fn path_or(&mut self, key: &'static str, flag: Option<PathBuf>, default: PathBuf) -> Result<PathBuf, CliError> {
        let v = self.optional_path(key, flag)?;
        match v {
            Some(p) => Ok(p),
            None => {
                self.resolved.pop();
                self.resolved.push((key, Value::Path(default.clone())));
                Ok(default)
            }
        }
    }

    /// Rejects config keys that no setting of this command consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!(
                "unknown config keys for `{}`: {}",
                self.command,
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }

    /// Manifest text with paths made relative to `dir`.
    pub fn manifest(&self, dir: &Path) -> String {
        let base = absolute(dir);
        let mut out = String::from("# jezsl run manifest; usable as --config\n");
        out.push_str(&format!("command={}\n", self.command));
        out.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        for (key, value) in &self.resolved {
            let shown = match value {
                Value::Text(s) => s.clone(),
                Value::Missing => String::new(),
                Value::Path(p) => {
                    let rel = pathdiff::diff_paths(absolute(p), &base).unwrap_or_else(|| absolute(p));
                    if rel.as_os_str().is_empty() {
                        ".".to_string()
                    } else {
                        rel.display().to_string()
                    }
                }
            };
            out.push_str(&format!("{key}={shown}\n"));
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), CliError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::write(path, self.manifest(dir)).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        log::debug!("wrote {}", path.display());
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    if let Ok(c) = p.canonicalize() {
        return c;
    }
    std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

/// Manifest location for a single-file artifact: `<file>.manifest`.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    file.with_file_name(name)
}
