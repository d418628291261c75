//! `key = value` text configs.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys
//! must be unique.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|_| Error::Parse {
            line: *line,
            message: format!("invalid value `{v}` for `{key}`"),
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    line: *line,
                    message: format!("invalid list item `{s}` for `{key}`"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Rejects keys outside `known`, catching typos in configs.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_lists_and_comments() {
        let kv = KeyValues::parse("# header\nseed = 7\nnames = a, b ,c\n\nrate=0.5 # trailing\n").unwrap();
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(kv.get::<f64>("rate").unwrap(), Some(0.5));
        assert_eq!(
            kv.get_list::<String>("names").unwrap().unwrap(),
            vec!["a", "b", "c"]
        );
        assert_eq!(kv.get::<u64>("missing").unwrap(), None);
        assert!(kv.require::<u64>("missing").is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = KeyValues::parse("a = 1\nbroken line\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = KeyValues::parse("a = 1\na = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let kv = KeyValues::parse("\nn = x\n").unwrap();
        assert!(matches!(kv.get::<u32>("n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(kv.check_known(&["m"]), Err(Error::Parse { line: 2, .. })));
    }
}
