//! Versioned `key = value` checkpoint text.
//!
//! Floats are written in Rust's shortest round-trip form, so every value
//! reads back bit-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::engine::MaskSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dmd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, String>,
}

fn missing(key: &str) -> Error {
    Error::Checkpoint(format!("missing key `{key}`"))
}

fn bad(key: &str, value: &str) -> Error {
    Error::Checkpoint(format!("malformed value for `{key}`: `{}`", truncate(value)))
}

fn truncate(v: &str) -> &str {
    match v.char_indices().nth(40) {
        Some((i, _)) => &v[..i],
        None => v,
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut c = Self::default();
        c.put("format", FORMAT);
        c.put("version", VERSION);
        c
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries.get(key).map(String::as_str).ok_or_else(|| missing(key))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get_str(key)?;
        v.parse().map_err(|_| bad(key, v))
    }

    pub fn put_f64s(&mut self, key: impl Into<String>, values: &[f64]) {
        let mut s = String::with_capacity(values.len() * 20);
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v}");
        }
        self.entries.insert(key.into(), s);
    }

    pub fn get_f64s(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.get_str(key)?;
        v.split_ascii_whitespace()
            .map(|x| x.parse().map_err(|_| bad(key, x)))
            .collect()
    }

    pub fn put_tensor(&mut self, key: &str, t: &Tensor) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        self.put(format!("{key}.shape"), shape.join("x"));
        self.put_f64s(format!("{key}.data"), t.data());
    }

    pub fn get_tensor(&self, key: &str) -> Result<Tensor> {
        let sk = format!("{key}.shape");
        let s = self.get_str(&sk)?;
        let shape = if s.is_empty() {
            Vec::new()
        } else {
            s.split('x')
                .map(|d| d.parse().map_err(|_| bad(&sk, s)))
                .collect::<Result<Vec<usize>>>()?
        };
        Tensor::new(shape, self.get_f64s(&format!("{key}.data"))?)
    }

    pub fn put_rng(&mut self, key: &str, rng: &ChaCha8Rng) {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        self.put(
            key,
            format!("{seed}:{}:{}", rng.get_stream(), rng.get_word_pos()),
        );
    }

    pub fn get_rng(&self, key: &str) -> Result<ChaCha8Rng> {
        let v = self.get_str(key)?;
        let mut parts = v.split(':');
        let (Some(hex), Some(stream), Some(pos), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(key, v));
        };
        if hex.len() != 64 {
            return Err(bad(key, v));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad(key, v))?;
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream.parse().map_err(|_| bad(key, v))?);
        rng.set_word_pos(pos.parse().map_err(|_| bad(key, v))?);
        Ok(rng)
    }

    pub fn put_mask(&mut self, key: &str, m: &MaskSpec) {
        self.put(format!("{key}.layer"), m.layer_index);
        self.put(format!("{key}.ratio"), m.ratio);
        self.put(format!("{key}.seed"), m.seed);
        self.put(format!("{key}.start"), m.interval.0);
        self.put(
            format!("{key}.end"),
            m.interval.1.map_or_else(|| "open".to_string(), |e| e.to_string()),
        );
        self.put_tensor(&format!("{key}.mask"), &m.mask);
    }

    pub fn get_mask(&self, key: &str) -> Result<MaskSpec> {
        let end_key = format!("{key}.end");
        let end = match self.get_str(&end_key)? {
            "open" => None,
            v => Some(v.parse().map_err(|_| bad(&end_key, v))?),
        };
        Ok(MaskSpec {
            layer_index: self.get(&format!("{key}.layer"))?,
            ratio: self.get(&format!("{key}.ratio"))?,
            seed: self.get(&format!("{key}.seed"))?,
            interval: (self.get(&format!("{key}.start"))?, end),
            mask: self.get_tensor(&format!("{key}.mask"))?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
                .ok_or_else(|| Error::Checkpoint(format!("line {}: expected `key = value`", no + 1)))?;
            entries.insert(k.to_string(), v.to_string());
        }
        let c = Self { entries };
        let format = c.get_str("format")?;
        if format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{format}`)")));
        }
        let version: u32 = c.get("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn floats_round_trip_bit_exact() {
        let vals = [0.1, -1e-300, 1.0 / 3.0, f64::MAX, 5e-324, -0.0];
        let mut c = Checkpoint::new();
        c.put_f64s("v", &vals);
        let back = Checkpoint::parse(&c.to_text()).unwrap().get_f64s("v").unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rng_resumes_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(7);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut c = Checkpoint::new();
        c.put_rng("r", &rng);
        let mut back = Checkpoint::parse(&c.to_text()).unwrap().get_rng("r").unwrap();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), back.next_u64());
        }
    }

    #[test]
    fn rejects_foreign_text() {
        assert!(Checkpoint::parse("format = other\nversion = 1\n").is_err());
        assert!(Checkpoint::parse("format = dmd-checkpoint\nversion = 9\n").is_err());
        assert!(matches!(Checkpoint::new().get::<u64>("step"), Err(Error::Checkpoint(_))));
    }
}
