//! Line-oriented `key=value` configuration parsing shared by the domain
//! spec, train config and experiment plan formats.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed configuration: `key=value` pairs plus the non-kv lines
/// (directives such as `synonyms ...` or `rule ...`) in file order.
pub struct KvFile {
    pub pairs: BTreeMap<String, String>,
    pub directives: Vec<String>,
}

pub fn parse(text: &str) -> KvFile {
    let mut pairs = BTreeMap::new();
    let mut directives = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            // Directive lines may legitimately contain '=' (e.g. bias
            // separators); only treat single-token keys as kv pairs.
            if !key.trim().contains(char::is_whitespace) {
                pairs.insert(key.trim().to_string(), value.trim().to_string());
                continue;
            }
        }
        directives.push(line.to_string());
    }
    KvFile { pairs, directives }
}

impl KvFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_as(key)?.unwrap_or(default))
    }
}
