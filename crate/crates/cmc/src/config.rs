//! Flat key=value run configuration and deterministic RNG substreams.
//!
//! Precedence: built-in defaults < config file < command-line overrides.
//! Every run writes back the fully resolved map so it can be replayed.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Ordered key=value map. Keys are dotted lowercase identifiers.
#[derive(Clone, Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format(
                    path,
                    format!("line {}: expected key=value, got {:?}", lineno + 1, raw),
                ));
            };
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    /// Apply `key=value` strings from the command line, overriding earlier
    /// values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not key=value")));
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_default(&mut self, key: &str, value: &str) {
        self.values.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key}={v:?}"))),
        }
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Write the resolved configuration, sorted by key.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Independent RNG stream derived from the root seed, a stream name and an
/// epoch index. Streams never overlap across names or epochs, and resuming
/// at an epoch boundary reproduces the exact stream.
pub fn substream(root_seed: u64, name: &str, epoch: usize) -> ChaCha8Rng {
    // FNV-1a over (name, epoch) mixed with the root seed; stable across
    // platforms, unlike DefaultHasher
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in name.bytes() {
        eat(b);
    }
    eat(0xff);
    for b in (epoch as u64).to_le_bytes() {
        eat(b);
    }
    ChaCha8Rng::seed_from_u64(root_seed ^ h)
}

/// Worker-count knob. The engine computes on one thread; values other than
/// 1 are accepted and logged so launch scripts stay portable.
pub fn requested_threads() -> Result<usize> {
    match std::env::var("MVC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("MVC_THREADS={v:?} is not a positive integer")))?;
            if n == 0 {
                return Err(Error::Config("MVC_THREADS must be >= 1".into()));
            }
            if n > 1 {
                log::info!("MVC_THREADS={n} requested; computation runs on a single thread");
            }
            Ok(n)
        }
    }
}
