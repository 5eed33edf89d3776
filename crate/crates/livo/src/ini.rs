//! Minimal INI reader/writer used for run configs and scenario specs.
//!
//! Sections in brackets, `key = value` pairs, `#`/`;` comments. Keys are
//! case-sensitive; values keep their raw text and are parsed on demand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IniError {
    #[error("line {0}: malformed entry `{1}`")]
    Malformed(usize, String),
    #[error("missing key `{1}` in section `{0}`")]
    MissingKey(String, String),
    #[error("key `{1}` in section `{0}`: cannot parse `{2}`")]
    BadValue(String, String, String),
}

#[derive(Debug, Default, Clone)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self, IniError> {
        let mut ini = Ini::default();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(IniError::Malformed(lineno + 1, raw.to_string()));
                }
                current = line[1..line.len() - 1].trim().to_string();
                ini.sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(IniError::Malformed(lineno + 1, raw.to_string()));
            };
            ini.sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ini)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, IniError> {
        self.get(section, key)
            .ok_or_else(|| IniError::MissingKey(section.to_string(), key.to_string()))
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>, IniError> {
        self.get(section, key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    IniError::BadValue(section.to_string(), key.to_string(), v.to_string())
                })
            })
            .transpose()
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, IniError> {
        Ok(self.get_f64(section, key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, IniError> {
        self.get(section, key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    IniError::BadValue(section.to_string(), key.to_string(), v.to_string())
                })
            })
            .transpose()
            .map(|v| v.unwrap_or(default))
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool, IniError> {
        self.get(section, key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(IniError::BadValue(
                    section.to_string(),
                    key.to_string(),
                    v.to_string(),
                )),
            })
            .transpose()
            .map(|v| v.unwrap_or(default))
    }

    /// Whitespace- or comma-separated list of floats.
    pub fn get_f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, IniError> {
        self.get(section, key)
            .map(|v| {
                v.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| {
                            IniError::BadValue(section.to_string(), key.to_string(), v.to_string())
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            let _ = writeln!(out, "[{section}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "# comment\n[world]\nkind = box\nsize = 10, 10, 3\n\n[noise]\npixel_sigma = 1.5\n";
        let ini = Ini::parse(text).unwrap();
        assert_eq!(ini.get("world", "kind"), Some("box"));
        assert_eq!(
            ini.get_f64_list("world", "size").unwrap().unwrap(),
            vec![10.0, 10.0, 3.0]
        );
        assert_eq!(ini.f64_or("noise", "pixel_sigma", 0.0).unwrap(), 1.5);
        assert_eq!(ini.f64_or("noise", "absent", 2.0).unwrap(), 2.0);

        let again = Ini::parse(&ini.to_text()).unwrap();
        assert_eq!(again.get("noise", "pixel_sigma"), Some("1.5"));
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = Ini::parse("[a]\nnot a pair\n").unwrap_err();
        assert_eq!(err, IniError::Malformed(2, "not a pair".to_string()));
    }
}
