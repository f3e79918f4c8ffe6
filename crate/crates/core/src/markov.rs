//! Character n-gram model with add-δ smoothing and count-threshold backoff.
//!
//! Passwords are padded with `order - 1` start symbols and terminated by an
//! end symbol, so every prediction is over 96 outcomes: the 95 printable
//! characters and END.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_printable, Corpus, PRINTABLE_MIN};
use crate::error::{Error, Result};
use crate::mc_estimator::{PasswordModel, Sample, SampleStatus};
use crate::model::checkpoint::read_u32;

/// Next-symbol alphabet size: 95 characters plus END.
pub const NUM_SYMBOLS: usize = 96;
pub const END: u8 = 95;
const START: u8 = 96;
const MAX_ORDER: usize = 9;

pub const NGRAM_MAGIC: &[u8; 4] = b"PWNG";
pub const NGRAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub order: usize,
    pub delta: f64,
    pub backoff_threshold: u64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self {
            order: 6,
            delta: 0.01,
            backoff_threshold: 10,
        }
    }
}

impl NgramConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_ORDER).contains(&self.order) {
            return Err(Error::Config(format!("order must be in 2..={MAX_ORDER}, got {}", self.order)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    /// Sorted by symbol.
    next: Vec<(u8, u32)>,
}

impl ContextCounts {
    fn count(&self, sym: u8) -> u32 {
        self.next
            .binary_search_by_key(&sym, |e| e.0)
            .map_or(0, |i| self.next[i].1)
    }
}

/// Contexts of length `< order`, packed 7 bits per symbol with the length
/// in the top byte.
fn pack(ctx: &[u8]) -> u64 {
    ctx.iter().fold(0u64, |k, &s| k << 7 | s as u64) | (ctx.len() as u64) << 56
}

fn symbol(b: u8, position: usize) -> Result<u8> {
    if is_printable(b) {
        Ok(b - PRINTABLE_MIN)
    } else {
        Err(Error::Encoding { position, byte: b })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    config: NgramConfig,
    /// Longest password `sample` will produce.
    max_length: usize,
    contexts: HashMap<u64, ContextCounts>,
}

pub fn train_ngram(data: &Corpus, config: NgramConfig) -> Result<NgramModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus("n-gram training data".into()));
    }
    let k = config.order - 1;
    let mut raw: HashMap<u64, HashMap<u8, u32>> = HashMap::new();
    let mut history = Vec::with_capacity(64);
    for pw in data.iter() {
        history.clear();
        history.resize(k, START);
        for (i, &b) in pw.iter().chain(std::iter::once(&0)).enumerate() {
            let next = if i == pw.len() { END } else { symbol(b, i)? };
            let h = history.len();
            for len in 0..=k {
                *raw.entry(pack(&history[h - len..])).or_default().entry(next).or_default() += 1;
            }
            history.push(next);
        }
    }
    let contexts = raw
        .into_iter()
        .map(|(key, m)| {
            let mut next: Vec<(u8, u32)> = m.into_iter().collect();
            next.sort_unstable();
            let total = next.iter().map(|e| e.1 as u64).sum();
            (key, ContextCounts { total, next })
        })
        .collect();
    Ok(NgramModel {
        config,
        max_length: data.policy.max_length,
        contexts,
    })
}

impl NgramModel {
    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// The counts that answer a query after `history` (start-padded symbol
    /// sequence): the longest suffix with total ≥ threshold and total > 0.
    fn backoff(&self, history: &[u8]) -> &ContextCounts {
        let k = (self.config.order - 1).min(history.len());
        for len in (1..=k).rev() {
            if let Some(c) = self.contexts.get(&pack(&history[history.len() - len..])) {
                if c.total > 0 && c.total >= self.config.backoff_threshold {
                    return c;
                }
            }
        }
        &self.contexts[&pack(&[])]
    }

    fn prob(&self, c: &ContextCounts, sym: u8) -> f64 {
        let d = self.config.delta;
        (c.count(sym) as f64 + d) / (c.total as f64 + NUM_SYMBOLS as f64 * d)
    }

    fn padded(&self, prefix: &[u8]) -> Result<Vec<u8>> {
        let mut h = vec![START; self.config.order - 1];
        for (i, &b) in prefix.iter().enumerate() {
            h.push(symbol(b, i)?);
        }
        Ok(h)
    }

    /// Distribution over the next symbol after the password prefix
    /// `prefix`; index [`END`] is end-of-password, index `b - 0x20` is
    /// character `b`.
    pub fn next_distribution(&self, prefix: &[u8]) -> Result<Vec<f64>> {
        let h = self.padded(prefix)?;
        let c = self.backoff(&h);
        Ok((0..NUM_SYMBOLS as u8).map(|s| self.prob(c, s)).collect())
    }

    /// Natural-log probability including the end step.
    pub fn log_prob(&self, pw: &[u8]) -> Result<f64> {
        let mut h = self.padded(&[])?;
        let mut lp = 0.0;
        for (i, &b) in pw.iter().enumerate() {
            let s = symbol(b, i)?;
            lp += self.prob(self.backoff(&h), s).ln();
            h.push(s);
        }
        Ok(lp + self.prob(self.backoff(&h), END).ln())
    }

    fn draw(&self, c: &ContextCounts, rng: &mut ChaCha8Rng) -> u8 {
        let d = self.config.delta;
        let smooth = NUM_SYMBOLS as f64 * d;
        let mut u = rng.random::<f64>() * (c.total as f64 + smooth);
        if u < smooth {
            return ((u / d) as usize).min(NUM_SYMBOLS - 1) as u8;
        }
        u -= smooth;
        for &(s, n) in &c.next {
            if u < n as f64 {
                return s;
            }
            u -= n as f64;
        }
        c.next.last().map_or(END, |e| e.0)
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng) -> Sample {
        let mut h = vec![START; self.config.order - 1];
        let mut text = Vec::new();
        let mut lp = 0.0;
        let status = loop {
            let c = self.backoff(&h);
            let s = self.draw(c, rng);
            lp += self.prob(c, s).ln();
            if s == END {
                break SampleStatus::Complete;
            }
            if text.len() == self.max_length {
                break SampleStatus::Truncated;
            }
            text.push(s + PRINTABLE_MIN);
            h.push(s);
        };
        Sample {
            password: text,
            log_prob: lp,
            status,
        }
    }

    /// Ancestral samples; sample `i` uses ChaCha stream `i` of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Sample> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample_one(&mut rng)
            })
            .collect()
    }

    /// `PWNG`, u32 version, u32 manifest length, JSON manifest, then per
    /// context (ascending packed key): u8 length, symbols, u32 entry count,
    /// `(u8 symbol, u32 count)` entries.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let charset: String = (0..95u8).map(|s| (s + PRINTABLE_MIN) as char).collect();
        let manifest = NgramManifest {
            format_version: NGRAM_VERSION,
            config: self.config.clone(),
            charset,
            max_length: self.max_length,
            contexts: self.contexts.len(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(NGRAM_MAGIC);
        out.extend_from_slice(&NGRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut keys: Vec<u64> = self.contexts.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let len = (key >> 56) as usize;
            out.push(len as u8);
            for i in (0..len).rev() {
                out.push(((key >> (7 * i)) & 0x7f) as u8);
            }
            let c = &self.contexts[&key];
            out.extend_from_slice(&(c.next.len() as u32).to_le_bytes());
            for &(s, n) in &c.next {
                out.push(s);
                out.extend_from_slice(&n.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(NGRAM_MAGIC.as_slice()) {
            return Err(Error::Format("not an n-gram model (bad magic)".into()));
        }
        let version = read_u32(bytes, 4)?;
        if version != NGRAM_VERSION {
            return Err(Error::Format(format!("unsupported n-gram version {version}")));
        }
        let len = read_u32(bytes, 8)? as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated n-gram manifest".into()))?;
        let manifest: NgramManifest = serde_json::from_slice(json)?;
        manifest.config.validate()?;
        let truncated = || Error::Format("truncated n-gram table".into());
        let mut at = 12 + len;
        let mut contexts = HashMap::with_capacity(manifest.contexts);
        for _ in 0..manifest.contexts {
            let clen = *bytes.get(at).ok_or_else(truncated)? as usize;
            if clen >= manifest.config.order {
                return Err(Error::Format(format!("context of length {clen} in order-{} model", manifest.config.order)));
            }
            let ctx = bytes.get(at + 1..at + 1 + clen).ok_or_else(truncated)?;
            at += 1 + clen;
            let entries = read_u32(bytes, at)? as usize;
            at += 4;
            let mut next = Vec::with_capacity(entries);
            for _ in 0..entries {
                let s = *bytes.get(at).ok_or_else(truncated)?;
                let n = read_u32(bytes, at + 1)?;
                if s as usize >= NUM_SYMBOLS {
                    return Err(Error::Format(format!("next symbol {s} out of range")));
                }
                next.push((s, n));
                at += 5;
            }
            let total = next.iter().map(|e| e.1 as u64).sum();
            contexts.insert(pack(ctx), ContextCounts { total, next });
        }
        if at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after n-gram table", bytes.len() - at)));
        }
        if !contexts.contains_key(&pack(&[])) {
            return Err(Error::Format("n-gram table lacks the unigram context".into()));
        }
        Ok(Self {
            config: manifest.config,
            max_length: manifest.max_length,
            contexts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct NgramManifest {
    format_version: u32,
    config: NgramConfig,
    charset: String,
    max_length: usize,
    contexts: usize,
}

pub fn ngram_log_prob(m: &NgramModel, pw: &[u8]) -> Result<f64> {
    m.log_prob(pw)
}

pub fn ngram_sample(m: &NgramModel, n: usize, seed: u64) -> Vec<Sample> {
    m.sample(n, seed)
}

impl PasswordModel for NgramModel {
    fn log_prob(&self, pw: &[u8]) -> Result<f64> {
        NgramModel::log_prob(self, pw)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        Ok(NgramModel::sample(self, n, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FilterPolicy;

    fn corpus(pws: &[&str], min: usize) -> Corpus {
        Corpus::from_passwords(pws.iter().map(|s| s.as_bytes().to_vec()), "t", FilterPolicy::new(min, 30).unwrap())
            .unwrap()
            .0
    }

    fn cfg(order: usize, delta: f64, threshold: u64) -> NgramConfig {
        NgramConfig {
            order,
            delta,
            backoff_threshold: threshold,
        }
    }

    #[test]
    fn packing_distinguishes_lengths() {
        assert_ne!(pack(&[]), pack(&[0]));
        assert_ne!(pack(&[0]), pack(&[0, 0]));
        assert_ne!(pack(&[1, 2]), pack(&[2, 1]));
        assert_eq!(pack(&[96, 3]) >> 56, 2);
    }

    #[test]
    fn simplex_and_backoff_to_unigram() {
        let m = train_ngram(&corpus(&["abcabc", "hello1", "passw0rd"], 6), NgramConfig::default()).unwrap();
        for prefix in ["", "ab", "zzzzzzz", "passw"] {
            let d = m.next_distribution(prefix.as_bytes()).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // threshold 10 is above every context count, so all queries use the unigram
        let uni = m.next_distribution(b"").unwrap();
        assert_eq!(m.next_distribution(b"zz~").unwrap(), uni);
    }

    #[test]
    fn ml_ratios_with_zero_threshold() {
        let m = train_ngram(&corpus(&["aaaaaa", "aaaaaa"], 6), cfg(2, 1e-12, 0)).unwrap();
        let d = m.next_distribution(b"aaa").unwrap();
        assert!((d[(b'a' - 32) as usize] - 5.0 / 6.0).abs() < 1e-9);
        assert!((d[END as usize] - 1.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn appending_lowers_log_prob() {
        let m = train_ngram(&corpus(&["abcdef", "abcdeg"], 6), NgramConfig::default()).unwrap();
        let base = m.log_prob(b"abcde").unwrap();
        for c in [b'f', b'x', b' '] {
            let mut pw = b"abcde".to_vec();
            pw.push(c);
            assert!(m.log_prob(&pw).unwrap() < base);
        }
        assert!(matches!(m.log_prob("ab\u{e9}".as_bytes()), Err(Error::Encoding { position: 2, .. })));
    }

    #[test]
    fn samples_are_deterministic_and_consistent() {
        let m = train_ngram(&corpus(&["abcdef"], 6), cfg(6, 1e-9, 0)).unwrap();
        let s = m.sample(50, 3);
        assert_eq!(s, m.sample(50, 3));
        for x in &s {
            assert_eq!(x.password, b"abcdef");
            assert!((x.log_prob - m.log_prob(&x.password).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let m = train_ngram(&corpus(&["abc123", "letmein", "q1w2e3r4"], 6), NgramConfig::default()).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = NgramModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(NgramModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
