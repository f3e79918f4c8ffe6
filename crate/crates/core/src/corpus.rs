//! Password corpora: loading with a filter policy, sampling, splitting, and
//! 3-gram statistics for comparing corpora.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRINTABLE_MIN: u8 = 0x20;
pub const PRINTABLE_MAX: u8 = 0x7e;

pub fn is_printable(b: u8) -> bool {
    (PRINTABLE_MIN..=PRINTABLE_MAX).contains(&b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_length: usize,
    pub max_length: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_length: 6,
            max_length: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooShort,
    TooLong,
    Charset,
}

impl FilterPolicy {
    pub fn new(min_length: usize, max_length: usize) -> Result<Self> {
        let policy = Self {
            min_length,
            max_length,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::Config(format!(
                "filter policy needs 0 < min_length <= max_length, got {}..{}",
                self.min_length, self.max_length
            )));
        }
        Ok(())
    }

    /// Charset is checked first, so a non-ASCII short line counts as a charset
    /// rejection.
    pub fn check(&self, pw: &[u8]) -> std::result::Result<(), Rejection> {
        if !pw.iter().all(|&b| is_printable(b)) {
            Err(Rejection::Charset)
        } else if pw.len() < self.min_length {
            Err(Rejection::TooShort)
        } else if pw.len() > self.max_length {
            Err(Rejection::TooLong)
        } else {
            Ok(())
        }
    }
}

/// Aggregate counts from a corpus load. Never contains passwords.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub lines_read: usize,
    pub kept: usize,
    pub rejected_short: usize,
    pub rejected_long: usize,
    pub rejected_charset: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lines_read={} kept={} rejected_short={} rejected_long={} rejected_charset={}",
            self.lines_read, self.kept, self.rejected_short, self.rejected_long, self.rejected_charset
        )
    }
}

/// An ordered multiset of passwords that all satisfy `policy`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    passwords: Vec<Vec<u8>>,
    pub source_label: String,
    pub policy: FilterPolicy,
}

impl Corpus {
    /// Builds a corpus from in-memory passwords, dropping the ones the policy
    /// rejects.
    pub fn from_passwords<I, P>(passwords: I, label: &str, policy: FilterPolicy) -> Result<(Self, LoadReport)>
    where
        I: IntoIterator<Item = P>,
        P: AsRef<[u8]>,
    {
        policy.validate()?;
        let mut report = LoadReport::default();
        let mut kept = Vec::new();
        for pw in passwords {
            let pw = pw.as_ref();
            report.lines_read += 1;
            match policy.check(pw) {
                Ok(()) => kept.push(pw.to_vec()),
                Err(Rejection::TooShort) => report.rejected_short += 1,
                Err(Rejection::TooLong) => report.rejected_long += 1,
                Err(Rejection::Charset) => report.rejected_charset += 1,
            }
        }
        report.kept = kept.len();
        if kept.is_empty() {
            return Err(Error::EmptyCorpus(format!("{label}: {report}")));
        }
        Ok((
            Self {
                passwords: kept,
                source_label: label.to_string(),
                policy,
            },
            report,
        ))
    }

    pub fn passwords(&self) -> &[Vec<u8>] {
        &self.passwords
    }

    pub fn len(&self) -> usize {
        self.passwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passwords.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.passwords.iter().map(|p| p.as_slice())
    }

    /// Keeps the first occurrence of each password.
    pub fn deduplicated(&self) -> Corpus {
        let mut seen = HashSet::new();
        let passwords = self
            .passwords
            .iter()
            .filter(|p| seen.insert(p.as_slice()))
            .cloned()
            .collect();
        Corpus {
            passwords,
            source_label: format!("{} dedup", self.source_label),
            policy: self.policy,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.passwords.iter().map(|p| p.len() + 1).sum());
        for pw in &self.passwords {
            out.extend_from_slice(pw);
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    fn derived(&self, passwords: Vec<Vec<u8>>, label: String) -> Corpus {
        Corpus {
            passwords,
            source_label: label,
            policy: self.policy,
        }
    }
}

/// Reads one password per LF-terminated line. A trailing CR is stripped so
/// that CRLF files load the same as LF files.
pub fn load_corpus(path: &Path, policy: FilterPolicy) -> Result<(Corpus, LoadReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if bytes.ends_with(b"\n") || bytes.is_empty() {
        lines.pop();
    }
    let lines = lines.into_iter().map(|l| l.strip_suffix(b"\r").unwrap_or(l));
    Corpus::from_passwords(lines, &path.display().to_string(), policy)
}

/// Uniform sample of `n` passwords without replacement.
pub fn sample_corpus(c: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    if n > c.len() {
        return Err(Error::Bounds(format!(
            "cannot sample {n} passwords from a corpus of {}",
            c.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, c.len(), n);
    let passwords = picked.iter().map(|i| c.passwords[i].clone()).collect();
    Ok(c.derived(passwords, format!("{} sample n={n} seed={seed}", c.source_label)))
}

/// Shuffles and cuts at `round(train_fraction * len)`.
pub fn split_corpus(c: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((c.len() as f64) * train_fraction).round() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| c.passwords[i].clone()).collect();
    Ok((
        c.derived(take(&order[..cut]), format!("{} train seed={seed}", c.source_label)),
        c.derived(take(&order[cut..]), format!("{} test seed={seed}", c.source_label)),
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrigramDistribution {
    counts: BTreeMap<[u8; 3], u64>,
    total: u64,
}

impl TrigramDistribution {
    pub fn from_counts<I: IntoIterator<Item = ([u8; 3], u64)>>(counts: I) -> Self {
        let mut dist = Self::default();
        for (k, v) in counts {
            if v > 0 {
                *dist.counts.entry(k).or_insert(0) += v;
                dist.total += v;
            }
        }
        dist
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, gram: &[u8; 3]) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn probability(&self, gram: &[u8; 3]) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(gram) as f64 / self.total as f64
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8; 3], u64)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }
}

/// Counts every overlapping interior 3-character window.
pub fn trigram_distribution(c: &Corpus) -> TrigramDistribution {
    let mut dist = TrigramDistribution::default();
    for pw in c.iter() {
        for w in pw.windows(3) {
            *dist.counts.entry([w[0], w[1], w[2]]).or_insert(0) += 1;
            dist.total += 1;
        }
    }
    dist
}

/// Jensen-Shannon divergence in bits, over the union of both supports.
///
/// Keys are visited in sorted order and each per-key term is symmetric in
/// its operands, so `js_divergence(p, q) == js_divergence(q, p)` bitwise.
pub fn js_divergence(p: &TrigramDistribution, q: &TrigramDistribution) -> Result<f64> {
    if p.total == 0 || q.total == 0 {
        return Err(Error::EmptyCorpus("js divergence of an empty distribution".into()));
    }
    let keys: BTreeSet<&[u8; 3]> = p.counts.keys().chain(q.counts.keys()).collect();
    let half_kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut sum = 0.0;
    for k in keys {
        let a = p.probability(k);
        let b = q.probability(k);
        let m = 0.5 * (a + b);
        sum += half_kl(a, m) + half_kl(b, m);
    }
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(pws: &[&str]) -> Corpus {
        Corpus::from_passwords(pws.iter().map(|s| s.as_bytes()), "t", FilterPolicy::default())
            .unwrap()
            .0
    }

    fn write_lines(dir: &tempfile::TempDir, lines: &[&[u8]]) -> std::path::PathBuf {
        let path = dir.path().join("c.txt");
        let mut bytes = Vec::new();
        for l in lines {
            bytes.extend_from_slice(l);
            bytes.push(b'\n');
        }
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn load_drops_short_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, &[b"password", b"abc12", b"qwerty"]);
        let (c, report) = load_corpus(&path, FilterPolicy::default()).unwrap();
        assert_eq!(c.passwords(), &[b"password".to_vec(), b"qwerty".to_vec()]);
        assert_eq!(report.rejected_short, 1);
        assert_eq!(report.lines_read, 3);
        assert_eq!(report.kept, 2);
    }

    #[test]
    fn load_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, &[]);
        assert!(matches!(
            load_corpus(&path, FilterPolicy::default()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn load_rejects_non_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, &["pässword1".as_bytes(), b"hunter22"]);
        let (c, report) = load_corpus(&path, FilterPolicy::default()).unwrap();
        assert_eq!(c.passwords(), &[b"hunter22".to_vec()]);
        assert_eq!(report.rejected_charset, 1);
    }

    #[test]
    fn load_rejects_long_and_strips_cr() {
        let dir = tempfile::tempdir().unwrap();
        let long = vec![b'x'; 31];
        let path = write_lines(&dir, &[&long, b"abcdef\r"]);
        let (c, report) = load_corpus(&path, FilterPolicy::default()).unwrap();
        assert_eq!(c.passwords(), &[b"abcdef".to_vec()]);
        assert_eq!(report.rejected_long, 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus(Path::new("/nonexistent/corpus.txt"), FilterPolicy::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn policy_validation() {
        assert!(FilterPolicy::new(0, 5).is_err());
        assert!(FilterPolicy::new(7, 6).is_err());
        assert!(FilterPolicy::new(6, 6).is_ok());
    }

    #[test]
    fn load_write_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, &[b"password", b"abc", b"letmein1", b"password"]);
        let (c1, _) = load_corpus(&path, FilterPolicy::default()).unwrap();
        let out = dir.path().join("again.txt");
        c1.write(&out).unwrap();
        let (c2, report) = load_corpus(&out, FilterPolicy::default()).unwrap();
        assert_eq!(c1.passwords(), c2.passwords());
        assert_eq!(report.kept, report.lines_read);
    }

    #[test]
    fn full_sample_is_permutation() {
        let c = corpus(&["aaaaaa", "bbbbbb", "cccccc", "aaaaaa"]);
        let s = sample_corpus(&c, c.len(), 99).unwrap();
        let mut a = c.passwords().to_vec();
        let mut b = s.passwords().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(s.source_label.contains("n=4") && s.source_label.contains("seed=99"));
    }

    #[test]
    fn sample_is_deterministic() {
        let c = corpus(&["aaaaaa", "bbbbbb", "cccccc", "dddddd", "eeeeee"]);
        assert_eq!(sample_corpus(&c, 3, 1).unwrap(), sample_corpus(&c, 3, 1).unwrap());
        assert!(matches!(sample_corpus(&c, 6, 1), Err(Error::Bounds(_))));
    }

    #[test]
    fn sample_preserves_prefix_fraction() {
        // 40% start with '1'; n=1000 sampled without replacement from 10,000.
        // Binomial sd is sqrt(.4*.6/1000) ~ 0.0155, so +-0.05 is over 3 sd.
        let pws: Vec<String> = (0..10_000)
            .map(|i| if i % 5 < 2 { format!("1pass{i}") } else { format!("xpass{i}") })
            .collect();
        let (c, _) = Corpus::from_passwords(&pws, "mix", FilterPolicy::default()).unwrap();
        let s = sample_corpus(&c, 1000, 7).unwrap();
        let frac = s.iter().filter(|p| p[0] == b'1').count() as f64 / 1000.0;
        assert!((frac - 0.4).abs() <= 0.05, "fraction {frac}");
    }

    #[test]
    fn split_sizes_and_partition() {
        let pws: Vec<String> = (0..10).map(|i| format!("passw{i}")).collect();
        let (c, _) = Corpus::from_passwords(&pws, "ten", FilterPolicy::default()).unwrap();
        let (a, b) = split_corpus(&c, 0.9, 3).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));

        let (c, _) = Corpus::from_passwords(
            (0..11).map(|i| format!("pw{:05}", i % 4)),
            "odd",
            FilterPolicy::default(),
        )
        .unwrap();
        let (a, b) = split_corpus(&c, 0.5, 3).unwrap();
        assert!(a.len().abs_diff(b.len()) <= 1);

        let (a, b) = split_corpus(&c, 0.8, 5).unwrap();
        let mut joined: Vec<_> = a.iter().chain(b.iter()).map(|p| p.to_vec()).collect();
        let mut orig = c.passwords().to_vec();
        joined.sort();
        orig.sort();
        assert_eq!(joined, orig);
        assert_eq!(split_corpus(&c, 0.8, 5).unwrap(), (a, b));
        assert!(split_corpus(&c, 1.0, 5).is_err());
        assert!(split_corpus(&c, 0.0, 5).is_err());
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let c = corpus(&["bbbbbb", "aaaaaa", "bbbbbb"]);
        assert_eq!(c.deduplicated().passwords(), &[b"bbbbbb".to_vec(), b"aaaaaa".to_vec()]);
    }

    #[test]
    fn trigram_examples() {
        let d = trigram_distribution(&corpus(&["aaaaaa"]));
        assert_eq!((d.count(b"aaa"), d.total(), d.len()), (4, 4, 1));

        let d = trigram_distribution(&corpus(&["abcdef"]));
        for g in [b"abc", b"bcd", b"cde", b"def"] {
            assert_eq!(d.count(g), 1);
        }
        assert_eq!(d.total(), 4);

        let d = trigram_distribution(&corpus(&["abcabc"]));
        assert_eq!(
            (d.count(b"abc"), d.count(b"bca"), d.count(b"cab"), d.total()),
            (2, 1, 1, 4)
        );
    }

    #[test]
    fn jsd_examples() {
        let p = TrigramDistribution::from_counts([(*b"abc", 1), (*b"bcd", 1)]);
        let q = TrigramDistribution::from_counts([(*b"abc", 1)]);
        let x = TrigramDistribution::from_counts([(*b"xyz", 1)]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert_eq!(js_divergence(&q, &x).unwrap(), 1.0);
        // p = (.5, .5), q = (1, 0), m = (.75, .25)
        let kl_pm = 0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2();
        let kl_qm = (1.0f64 / 0.75).log2();
        let expected = 0.5 * (kl_pm + kl_qm);
        assert!((js_divergence(&p, &q).unwrap() - expected).abs() < 1e-9);
        assert!(js_divergence(&p, &TrigramDistribution::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist() -> impl Strategy<Value = TrigramDistribution> {
            prop::collection::vec((0u8..6, 1u64..20), 1..12).prop_map(|v| {
                TrigramDistribution::from_counts(v.into_iter().map(|(k, c)| ([b'a' + k, b'b', b'c'], c)))
            })
        }

        proptest! {
            #[test]
            fn jsd_symmetric_and_bounded(p in dist(), q in dist()) {
                let a = js_divergence(&p, &q).unwrap();
                let b = js_divergence(&q, &p).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
            }

            #[test]
            fn trigram_total_matches_lengths(pws in prop::collection::vec("[a-d]{6,12}", 1..20)) {
                let (c, _) = Corpus::from_passwords(&pws, "p", FilterPolicy::default()).unwrap();
                let d = trigram_distribution(&c);
                let expected: u64 = pws.iter().map(|p| p.len() as u64 - 2).sum();
                prop_assert_eq!(d.total(), expected);
                let psum: f64 = d.iter().map(|(g, _)| d.probability(g)).sum();
                prop_assert!((psum - 1.0).abs() < 1e-9);
            }
        }
    }
}
