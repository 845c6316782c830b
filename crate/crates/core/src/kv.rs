//! Line-oriented `key = value` text files shared by manifests, scene
//! specifications and pipeline configs. `#` starts a comment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct KvFile {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

impl KvFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.push(Entry {
                line: i + 1,
                key: key.trim().to_string(),
                value: value.trim().to_string(),
            });
        }
        Ok(KvFile {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// Last value for `key`, if present.
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn error(&self, entry: Option<&Entry>, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: entry.map_or(0, |e| e.line),
            msg: msg.into(),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let entry = self
            .get(key)
            .ok_or_else(|| self.error(None, format!("missing field `{key}`")))?;
        self.parse_entry(entry)
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|e| self.parse_entry(e)).transpose()
    }

    pub fn parse_entry<T: FromStr>(&self, entry: &Entry) -> Result<T> {
        entry.value.parse().map_err(|_| {
            self.error(
                Some(entry),
                format!("malformed value `{}` for `{}`", entry.value, entry.key),
            )
        })
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key).map(|e| split_list(&e.value)).unwrap_or_default()
    }

    pub fn floats(&self, entry: &Entry) -> Result<Vec<f64>> {
        entry
            .value
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| self.error(Some(entry), format!("malformed number `{t}` in `{}`", entry.key)))
            })
            .collect()
    }
}

pub fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_last_wins() {
        let kv = KvFile::parse(Path::new("x"), "a = 1\n# c\nb=two # tail\na = 3\n").unwrap();
        assert_eq!(kv.require::<i32>("a").unwrap(), 3);
        assert_eq!(kv.get("b").unwrap().value, "two");
        assert!(kv.require::<i32>("b").is_err());
        assert!(KvFile::parse(Path::new("x"), "novalue\n").is_err());
    }
}
