//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; trailing `# ...`
//! comments are stripped. Training keys: `batch_size`, `max_lr`, `seed`,
//! `lambda1`, `lambda2`, `lambda_area`, and optionally `lambda_rand`
//! (default: batch size clipped to the class count) and `epochs` (default 1).

use std::collections::BTreeMap;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::{LossWeights, TrainConfig};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                config_err!("line {}: expected `key = value`, got {raw:?}", n + 1)
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(config_err!("line {}: empty key", n + 1));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(config_err!("line {}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(Self { map })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| config_err!("missing key `{key}`"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get_str(key)?;
        v.parse()
            .map_err(|_| config_err!("key `{key}`: cannot parse {v:?}"))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// SHA-256 of the sorted `key=value` lines.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Canonical text form, sorted by key.
    pub fn to_text(&self) -> String {
        self.map
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            max_lr: self.get("max_lr")?,
            epochs: self.get_or("epochs", 1)?,
            seed: self.get("seed")?,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| config_err!("{e}"))?;
        Ok(cfg)
    }

    pub fn loss_weights(&self, classes: usize) -> Result<LossWeights> {
        let batch: usize = self.get("batch_size")?;
        let w = LossWeights::new(
            self.get("lambda1")?,
            self.get("lambda2")?,
            self.get("lambda_area")?,
            self.get_or("lambda_rand", batch.min(classes).max(1))?,
        )?;
        w.validate(classes)?;
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    const SAMPLE: &str = "# attention training\nbatch_size = 64\nmax_lr = 1e-3  # peak\nseed = 7\n\nlambda1 = 0.5\nlambda2 = 0.3\nlambda_area = 1\n";

    #[test]
    fn parses_documented_keys() {
        let kv = KeyValues::parse(SAMPLE).unwrap();
        let cfg = kv.train_config().unwrap();
        assert_eq!(
            (cfg.batch_size, cfg.max_lr, cfg.seed, cfg.epochs),
            (64, 1e-3, 7, 1)
        );
        let w = kv.loss_weights(10).unwrap();
        assert_eq!(w.lambda_rand, 10);
        assert!((w.lambda3 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn missing_key_is_named() {
        let kv = KeyValues::parse("batch_size = 4\nseed = 1").unwrap();
        match kv.train_config() {
            Err(Error::Config(m)) => assert!(m.contains("max_lr"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_and_duplicates_fail() {
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn digest_ignores_order_and_comments() {
        let a = KeyValues::parse("a = 1\nb = 2").unwrap();
        let b = KeyValues::parse("# c\nb = 2\n\na = 1 # x").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(
            a.digest(),
            KeyValues::parse("a = 1\nb = 3").unwrap().digest()
        );
    }
}
