//! Flat `key=value` configuration: one pair per line, `#` starts a comment,
//! list values are comma-separated. Later assignments (including `--set`
//! overrides) replace earlier ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every key any subcommand understands. Unknown keys are rejected so that
/// typos in a config or an override fail loudly.
pub const KNOWN_KEYS: &[&str] = &[
    // task
    "kind",
    "n",
    "m",
    "planted_indices",
    "planted_coeffs",
    "plant_count",
    "plant_lowest",
    "plant_rate_min",
    "plant_rate_max",
    "noise_std",
    "n_train",
    "n_val",
    "seed",
    // training
    "method",
    "rank",
    "alpha",
    "lr",
    "steps",
    "batch",
    "optimizer",
    "t_prelaunch",
    "s_dash",
    "record_every",
    "epsilon",
    "direction_mode",
    "init_mode",
    // experiment
    "methods",
    "direction_modes",
    "init_modes",
    "t_sweep",
    "s_sweep",
    "seeds",
    "full_ft_lr",
    "full_ft_steps",
    // analysis / oracle
    "state_dir",
    "w",
    "w_star",
];

/// Line number used in errors for values that came from `--set`.
pub const OVERRIDE_LINE: usize = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected key=value, got {line:?}"),
            })?;
            cfg.insert(k.trim(), v.trim(), line_no)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config {
            line: OVERRIDE_LINE,
            message: format!("override {pair:?} is not key=value"),
        })?;
        self.insert(k.trim(), v.trim(), OVERRIDE_LINE)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.insert(key, &value.to_string(), OVERRIDE_LINE)
    }

    fn insert(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config {
                line,
                message: format!("unknown key {key:?}"),
            });
        }
        self.entries
            .insert(key.to_string(), (value.to_string(), line));
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                message: format!("cannot parse {key}={v:?}"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Config {
                    line: *line,
                    message: format!("cannot parse list item {s:?} of {key}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Error pointing at the line that set `key`.
    pub fn error_at(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.entries.get(key).map_or(OVERRIDE_LINE, |(_, l)| *l),
            message: message.into(),
        }
    }
}

/// Renders resolved settings, sorted by key, in the same `key=value` syntax
/// the parser reads. Repeated identical pairs are written once.
pub fn render_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut sorted: Vec<(&str, String)> = pairs.into_iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut out = String::new();
    for (k, v) in sorted {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
