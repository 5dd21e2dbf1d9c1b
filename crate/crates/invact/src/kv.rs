//! Plain-text `key=value` files.
//!
//! Coefficient sets, quantizer tables, and training configs all share this
//! format: one `key=value` pair per line, `#` comments and blank lines
//! ignored, keys kept in file order.

use crate::{Error, Result};

/// An ordered list of `key=value` entries.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Pushes a float with enough digits to round-trip exactly.
    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), format!("{value:.17e}")));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Parse(format!("missing key {key:?}")))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("key {key:?}: {e}")))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("key {key:?}: {e}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blanks() {
        let kv = KvFile::parse("# header\n\na=1\n b = two \n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two"));
        assert_eq!(kv.get("c"), None);
    }

    #[test]
    fn f64_round_trips() {
        let mut kv = KvFile::new();
        kv.push_f64("x", -0.16997246666667);
        let parsed = KvFile::parse(&kv.render()).unwrap();
        assert_eq!(parsed.require_f64("x").unwrap(), -0.16997246666667);
    }

    #[test]
    fn missing_equals_is_an_error() {
        assert!(KvFile::parse("oops").is_err());
    }
}
