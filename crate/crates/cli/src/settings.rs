//! Option resolution: config file first, then command-line flags on top.
//!
//! A config file is either plain `key=value` lines (`#` comments allowed) or
//! an output file written by this tool, whose leading `# key=value` header
//! lines are read back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const TOOL_TAG: &str = "gatematch";

pub struct Settings {
    command: &'static str,
    allowed: &'static [&'static str],
    values: BTreeMap<String, String>,
    /// Resolved values in resolution order, echoed into output headers.
    resolved: Vec<(String, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let from_output = text.starts_with(&format!("# {TOOL_TAG}"));
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if from_output {
            // the header ends at the first non-comment line
            let Some(rest) = line.strip_prefix('#') else { break };
            if rest.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = rest.split_once('=') {
                out.push((normalize(k), v.trim().to_string()));
            }
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((normalize(k), v.trim().to_string())),
            None => return Err(CliError::Usage(format!("config line {}: expected key=value, got {line:?}", no + 1))),
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new(
        command: &'static str,
        allowed: &'static [&'static str],
        config: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                if !allowed.contains(&k.as_str()) {
                    return Err(CliError::Usage(format!("unknown config key {k:?} for {command}")));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Settings {
            command,
            allowed,
            values,
            resolved: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, value: String) {
        debug_assert!(self.allowed.contains(&key), "{key} not declared");
        self.resolved.retain(|(k, _)| k != key);
        self.resolved.push((key.to_string(), value));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parsed value or `default`; the value actually used is recorded.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        let v = match self.raw(key) {
            Some(s) => s
                .parse::<T>()
                .map_err(|e| CliError::Usage(format!("--{key}: {e}")))?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some(s) if s != "auto" && s != "none" => {
                let v = s
                    .parse::<T>()
                    .map_err(|e| CliError::Usage(format!("--{key}: {e}")))?;
                self.record(key, v.to_string());
                Ok(Some(v))
            }
            _ => {
                self.record(key, "none".into());
                Ok(None)
            }
        }
    }

    pub fn required<T>(&mut self, key: &str) -> Result<T, CliError>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        match self.optional(key)? {
            Some(v) => Ok(v),
            None => Err(CliError::Usage(format!("--{key} is required for {}", self.command))),
        }
    }

    pub fn flag(&mut self, key: &str) -> Result<bool, CliError> {
        self.get(key, false)
    }

    /// Comment header with every resolved option.
    pub fn header(&self) -> String {
        let mut s = format!("# {TOOL_TAG} {}\n", self.command);
        for (k, v) in &self.resolved {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_header_forms() {
        let plain = parse_config("# comment\nm=3\n\nk_folds = 4\n").unwrap();
        assert_eq!(plain, vec![("m".into(), "3".into()), ("k-folds".into(), "4".into())]);
        let header = parse_config("# gatematch estimate\n# m=3\n## diagnostics: x=1\nz,estimate\n# m=9\n").unwrap();
        assert_eq!(header, vec![("m".into(), "3".into())]);
        assert!(parse_config("m 3\n").is_err());
    }
}
