//! Monte Carlo guess-number estimation.
//!
//! A password's guess number under a model is the number of strings the
//! model ranks strictly ahead of it. Drawing `n` samples from the model and
//! weighting each by `1 / (n * p_i)` gives an unbiased estimate of that rank
//! without enumerating anything: `G(p) = sum over p_i > p of 1 / (n * p_i)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::checkpoint::read_u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleStatus {
    /// Ended with the end symbol; `log_prob` is the password's score.
    Complete,
    /// Hit the model's length limit before ending.
    Truncated,
    /// Drew a token that is not a password character.
    Invalid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub password: Vec<u8>,
    /// Natural log. For incomplete samples, the log-probability of the
    /// generated path.
    pub log_prob: f64,
    pub status: SampleStatus,
}

/// Anything that assigns probabilities to passwords and can sample from
/// that same distribution.
pub trait PasswordModel: Sync {
    fn log_prob(&self, pw: &[u8]) -> Result<f64>;

    /// Deterministic per seed.
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>>;

    fn max_password_len(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub model_id: String,
    /// Total draws, including samples that were not valid passwords.
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuessEstimate {
    pub guess_number: f64,
    pub standard_error: f64,
}

/// Sorted sample log-probabilities with prefix sums for O(log n) queries.
/// The table is kept in f32, the precision it is exported with.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloEstimator {
    meta: EstimatorMeta,
    log_probs: Vec<f32>,
    cumulative: Vec<f32>,
    std_errors: Vec<f32>,
}

impl MonteCarloEstimator {
    /// Builds the table from sample log-probabilities. Non-finite values are
    /// dropped but still count toward `meta.n`.
    pub fn from_log_probs(meta: EstimatorMeta, log_probs: impl IntoIterator<Item = f64>) -> Result<Self> {
        if meta.n == 0 {
            return Err(Error::Config("estimator needs at least one sample".into()));
        }
        let mut lps: Vec<f32> = log_probs
            .into_iter()
            .filter(|v| v.is_finite())
            .map(|v| v as f32)
            .filter(|v| v.is_finite())
            .collect();
        if lps.len() > meta.n {
            return Err(Error::Config(format!(
                "{} log-probabilities for {} draws",
                lps.len(),
                meta.n
            )));
        }
        lps.sort_by(|a, b| b.total_cmp(a));
        let n = meta.n as f64;
        let mut cumulative = Vec::with_capacity(lps.len() + 1);
        let mut std_errors = Vec::with_capacity(lps.len() + 1);
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        cumulative.push(0.0);
        std_errors.push(0.0);
        for &lp in &lps {
            let inv_p = (-(lp as f64)).exp();
            sum += inv_p / n;
            sum_sq += inv_p * inv_p / n;
            cumulative.push(sum as f32);
            let var = (sum_sq - sum * sum).max(0.0);
            std_errors.push((var / n).sqrt() as f32);
        }
        Ok(Self {
            meta,
            log_probs: lps,
            cumulative,
            std_errors,
        })
    }

    pub fn meta(&self) -> &EstimatorMeta {
        &self.meta
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    /// Sample log-probabilities, descending.
    pub fn log_probs(&self) -> &[f32] {
        &self.log_probs
    }

    /// Compared at table precision, so a string ties with its own samples.
    fn rank_index(&self, logp: f64) -> usize {
        let q = logp as f32;
        self.log_probs.partition_point(|&lp| lp > q)
    }

    /// Estimated number of strings more probable than `logp`.
    pub fn guess_number(&self, logp: f64) -> f64 {
        self.cumulative[self.rank_index(logp)] as f64
    }

    pub fn estimate(&self, logp: f64) -> GuessEstimate {
        let k = self.rank_index(logp);
        GuessEstimate {
            guess_number: self.cumulative[k] as f64,
            standard_error: self.std_errors[k] as f64,
        }
    }

    /// Table bytes: log-probs, cumulative sums, standard errors, all LE f32.
    pub fn table_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.log_probs.len() * 3 + 2) * 4);
        for v in self.log_probs.iter().chain(&self.cumulative).chain(&self.std_errors) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn table_len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn from_table_bytes(meta: EstimatorMeta, len: usize, bytes: &[u8]) -> Result<Self> {
        let want = (3 * len + 2) * 4;
        if bytes.len() != want {
            return Err(Error::Format(format!(
                "estimator table of {len} entries needs {want} bytes, found {}",
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let log_probs = floats[..len].to_vec();
        let cumulative = floats[len..2 * len + 1].to_vec();
        let std_errors = floats[2 * len + 1..].to_vec();
        if !log_probs.windows(2).all(|w| w[0] >= w[1]) || log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("estimator log-probabilities not sorted and finite".into()));
        }
        if meta.n == 0 || len > meta.n {
            return Err(Error::Format(format!("estimator of {len} entries claims n={}", meta.n)));
        }
        Ok(Self {
            meta,
            log_probs,
            cumulative,
            std_errors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = EstimatorFileManifest {
            format_version: ESTIMATOR_VERSION,
            meta: self.meta.clone(),
            table_len: self.table_len(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(ESTIMATOR_MAGIC);
        out.extend_from_slice(&ESTIMATOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.table_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(ESTIMATOR_MAGIC.as_slice()) {
            return Err(Error::Format("not an estimator file (bad magic)".into()));
        }
        let version = read_u32(bytes, 4)?;
        if version != ESTIMATOR_VERSION {
            return Err(Error::Format(format!("unsupported estimator version {version}")));
        }
        let len = read_u32(bytes, 8)? as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated estimator manifest".into()))?;
        let manifest: EstimatorFileManifest = serde_json::from_slice(json)?;
        Self::from_table_bytes(manifest.meta, manifest.table_len, &bytes[12 + len..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub const ESTIMATOR_MAGIC: &[u8; 4] = b"PWMC";
pub const ESTIMATOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EstimatorFileManifest {
    format_version: u32,
    meta: EstimatorMeta,
    table_len: usize,
}

pub fn build_estimator<M: PasswordModel + ?Sized>(
    model: &M,
    model_id: &str,
    n: usize,
    seed: u64,
) -> Result<MonteCarloEstimator> {
    if n == 0 {
        return Err(Error::Config("estimator needs at least one sample".into()));
    }
    let samples = model.sample(n, seed)?;
    let meta = EstimatorMeta {
        model_id: model_id.to_string(),
        n,
        seed,
    };
    MonteCarloEstimator::from_log_probs(
        meta,
        samples
            .iter()
            .filter(|s| s.status == SampleStatus::Complete)
            .map(|s| s.log_prob),
    )
}

/// Guess numbers for every password; `None` where the model cannot score
/// it (too long, bad character).
pub fn guess_numbers<M: PasswordModel + ?Sized>(
    est: &MonteCarloEstimator,
    scorer: &M,
    passwords: &[Vec<u8>],
) -> Vec<Option<GuessEstimate>> {
    passwords
        .par_iter()
        .map(|pw| scorer.log_prob(pw).ok().map(|lp| est.estimate(lp)))
        .collect()
}

/// `10^0 .. 10^20` in quarter decades.
pub fn default_grid() -> Vec<f64> {
    (0..=80).map(|i| 10f64.powf(i as f64 / 4.0)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub model_id: String,
    pub n: usize,
    pub seed: u64,
    pub test_label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuessingCurve {
    /// `(guess budget g, fraction of test passwords with guess number <= g)`
    pub points: Vec<(f64, f64)>,
    pub test_size: usize,
    pub unscorable: usize,
    /// Median of standard error / estimate over guessed passwords.
    pub median_relative_se: f64,
    pub meta: CurveMeta,
}

pub fn curve_from_guesses(guesses: &[Option<GuessEstimate>], grid: &[f64]) -> Result<GuessingCurve> {
    if guesses.is_empty() {
        return Err(Error::EmptyCorpus("guessing curve over an empty test set".into()));
    }
    if !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("curve grid must be strictly ascending".into()));
    }
    let mut sorted: Vec<f64> = guesses.iter().flatten().map(|g| g.guess_number).collect();
    sorted.sort_by(f64::total_cmp);
    let total = guesses.len() as f64;
    let points = grid
        .iter()
        .map(|&g| (g, sorted.partition_point(|&x| x <= g) as f64 / total))
        .collect();
    let mut rel: Vec<f64> = guesses
        .iter()
        .flatten()
        .filter(|g| g.guess_number > 0.0 && g.guess_number.is_finite())
        .map(|g| g.standard_error / g.guess_number)
        .collect();
    rel.sort_by(f64::total_cmp);
    Ok(GuessingCurve {
        points,
        test_size: guesses.len(),
        unscorable: guesses.iter().filter(|g| g.is_none()).count(),
        median_relative_se: rel.get(rel.len() / 2).copied().unwrap_or(0.0),
        meta: CurveMeta::default(),
    })
}

/// Coverage of `test` at each grid budget. Duplicates count with
/// multiplicity; unscorable passwords are never guessed.
pub fn guessing_curve<M: PasswordModel + ?Sized>(
    est: &MonteCarloEstimator,
    scorer: &M,
    test: &Corpus,
    grid: &[f64],
) -> Result<GuessingCurve> {
    let guesses = guess_numbers(est, scorer, test.passwords());
    let mut curve = curve_from_guesses(&guesses, grid)?;
    curve.meta = CurveMeta {
        model_id: est.meta.model_id.clone(),
        n: est.meta.n,
        seed: est.meta.seed,
        test_label: test.source_label.clone(),
    };
    Ok(curve)
}

impl GuessingCurve {
    fn log_points(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|&(g, c)| (g.log10(), c)).collect()
    }

    /// Linear interpolation in `(log10 g, coverage)`, flat beyond the ends.
    pub fn coverage_at(&self, g: f64) -> f64 {
        interpolate(&self.log_points(), g.log10())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.meta;
        let _ = writeln!(s, "# model_id: {}", m.model_id);
        let _ = writeln!(s, "# n: {}", m.n);
        let _ = writeln!(s, "# seed: {}", m.seed);
        let _ = writeln!(s, "# test: {}", m.test_label);
        let _ = writeln!(s, "# test_size: {}", self.test_size);
        let _ = writeln!(s, "# unscorable: {}", self.unscorable);
        let _ = writeln!(s, "# median_relative_se: {}", self.median_relative_se);
        let _ = writeln!(s, "log10_g,coverage");
        for &(g, c) in &self.points {
            let _ = writeln!(s, "{},{}", g.log10(), c);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut meta = CurveMeta::default();
        let mut curve = GuessingCurve {
            points: Vec::new(),
            test_size: 0,
            unscorable: 0,
            median_relative_se: 0.0,
            meta: CurveMeta::default(),
        };
        let bad = |line: &str| Error::Format(format!("bad curve line {line:?}"));
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (key, value) = rest.split_once(": ").unwrap_or((rest, ""));
                match key {
                    "model_id" => meta.model_id = value.to_string(),
                    "n" => meta.n = value.parse().map_err(|_| bad(line))?,
                    "seed" => meta.seed = value.parse().map_err(|_| bad(line))?,
                    "test" => meta.test_label = value.to_string(),
                    "test_size" => curve.test_size = value.parse().map_err(|_| bad(line))?,
                    "unscorable" => curve.unscorable = value.parse().map_err(|_| bad(line))?,
                    "median_relative_se" => curve.median_relative_se = value.parse().map_err(|_| bad(line))?,
                    _ => {}
                }
            } else if line.trim().is_empty() || line.starts_with("log10_g") {
                continue;
            } else {
                let (a, b) = line.split_once(',').ok_or_else(|| bad(line))?;
                let lg: f64 = a.trim().parse().map_err(|_| bad(line))?;
                let c: f64 = b.trim().parse().map_err(|_| bad(line))?;
                curve.points.push((10f64.powf(lg), c));
            }
        }
        if curve.points.is_empty() {
            return Err(Error::Format("curve has no points".into()));
        }
        curve.meta = meta;
        Ok(curve)
    }
}

fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let i = points.partition_point(|p| p.0 <= x);
    let (x0, y0) = points[i - 1];
    let (x1, y1) = points[i];
    if x1 == x0 {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveComparison {
    /// Mean of `a - b` over the sampled budgets.
    pub mean_difference: f64,
    /// Largest `a - b`.
    pub max_difference: f64,
    pub argmax_g: f64,
    pub points: usize,
}

/// Samples `points` budgets uniformly in log10 over the shared range.
pub fn compare_curves(a: &GuessingCurve, b: &GuessingCurve, points: usize) -> Result<CurveComparison> {
    if points == 0 || a.points.is_empty() || b.points.is_empty() {
        return Err(Error::Config("comparison needs points on both curves".into()));
    }
    let (la, lb) = (a.log_points(), b.log_points());
    let lo = la[0].0.max(lb[0].0);
    let hi = la[la.len() - 1].0.min(lb[lb.len() - 1].0);
    if lo > hi {
        return Err(Error::Config(format!(
            "curves do not overlap: shared log10 range [{lo}, {hi}] is empty"
        )));
    }
    let mut sum = 0.0;
    let mut best = (f64::NEG_INFINITY, lo);
    for j in 0..points {
        let x = if points == 1 {
            lo
        } else {
            lo + (hi - lo) * j as f64 / (points - 1) as f64
        };
        let d = interpolate(&la, x) - interpolate(&lb, x);
        sum += d;
        if d > best.0 {
            best = (d, x);
        }
    }
    Ok(CurveComparison {
        mean_difference: sum / points as f64,
        max_difference: best.0,
        argmax_g: 10f64.powf(best.1),
        points,
    })
}

/// An explicit distribution over a finite set of strings. Small enough
/// instances can be enumerated exactly, which makes this the reference
/// model for checking the estimator.
#[derive(Clone, Debug)]
pub struct FiniteModel {
    entries: Vec<(Vec<u8>, f64)>,
    index: HashMap<Vec<u8>, usize>,
    cdf: Vec<f64>,
}

impl FiniteModel {
    /// Probabilities are normalized; duplicate strings are merged.
    pub fn new(entries: impl IntoIterator<Item = (Vec<u8>, f64)>) -> Result<Self> {
        let mut merged: Vec<(Vec<u8>, f64)> = Vec::new();
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        for (s, p) in entries {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("invalid probability {p}")));
            }
            if p == 0.0 {
                continue;
            }
            match index.get(&s) {
                Some(&i) => merged[i].1 += p,
                None => {
                    index.insert(s.clone(), merged.len());
                    merged.push((s, p));
                }
            }
        }
        let total: f64 = merged.iter().map(|e| e.1).sum();
        if total <= 0.0 {
            return Err(Error::Config("finite model has no mass".into()));
        }
        let mut acc = 0.0;
        let mut cdf = Vec::with_capacity(merged.len());
        for e in &mut merged {
            e.1 /= total;
            acc += e.1;
            cdf.push(acc);
        }
        Ok(Self {
            entries: merged,
            index,
            cdf,
        })
    }

    pub fn entries(&self) -> &[(Vec<u8>, f64)] {
        &self.entries
    }

    pub fn probability(&self, s: &[u8]) -> f64 {
        self.index.get(s).map_or(0.0, |&i| self.entries[i].1)
    }
}

impl PasswordModel for FiniteModel {
    /// `-inf` outside the support.
    fn log_prob(&self, pw: &[u8]) -> Result<f64> {
        Ok(self.probability(pw).ln())
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        let last = self.entries.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * self.cdf[last];
                let i = self.cdf.partition_point(|&c| c <= u).min(last);
                let (s, p) = &self.entries[i];
                Sample {
                    password: s.clone(),
                    log_prob: p.ln(),
                    status: SampleStatus::Complete,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize) -> EstimatorMeta {
        EstimatorMeta {
            model_id: "t".into(),
            n,
            seed: 0,
        }
    }

    #[test]
    fn degenerate_single_sample() {
        let lp = (0.25f64).ln();
        let est = MonteCarloEstimator::from_log_probs(meta(1), [lp]).unwrap();
        assert_eq!(est.guess_number(0.0), 0.0);
        assert_eq!(est.guess_number(lp), 0.0);
        let g = est.guess_number(lp - 1.0);
        assert!((g - 4.0).abs() < 1e-5, "{g}");
    }

    #[test]
    fn boundary_queries() {
        let lps = [-1.0, -2.0, -3.0];
        let est = MonteCarloEstimator::from_log_probs(meta(3), lps).unwrap();
        assert_eq!(est.guess_number(f64::INFINITY), 0.0);
        let full: f64 = lps.iter().map(|&l| (-(l as f32) as f64).exp() / 3.0).sum();
        assert!((est.guess_number(-10.0) - full).abs() / full < 1e-6);
        // strict inequality: a tie is not counted
        let first = (1.0f32 as f64).exp() / 3.0;
        assert!((est.guess_number(-2.0) - first).abs() < 1e-5);
    }

    #[test]
    fn dropped_samples_still_count_in_n() {
        let est = MonteCarloEstimator::from_log_probs(meta(4), [(0.5f64).ln(), f64::NEG_INFINITY]).unwrap();
        assert_eq!(est.table_len(), 1);
        assert!((est.guess_number(-100.0) - 0.5).abs() < 1e-6);
        assert!(MonteCarloEstimator::from_log_probs(meta(0), []).is_err());
    }

    #[test]
    fn file_round_trip() {
        let est = MonteCarloEstimator::from_log_probs(meta(5), [-1.5, -0.5, -7.25, -3.0]).unwrap();
        let bytes = est.to_bytes().unwrap();
        assert_eq!(MonteCarloEstimator::from_bytes(&bytes).unwrap(), est);
        assert!(MonteCarloEstimator::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    fn step_curve(offset: f64) -> GuessingCurve {
        GuessingCurve {
            points: (0..=20).map(|i| (10f64.powi(i), (i as f64 / 40.0) + offset)).collect(),
            test_size: 10,
            unscorable: 0,
            median_relative_se: 0.0,
            meta: CurveMeta::default(),
        }
    }

    #[test]
    fn compare_identity_and_shift() {
        let a = step_curve(0.1);
        let b = step_curve(0.0);
        let same = compare_curves(&a, &a, 1000).unwrap();
        assert_eq!((same.mean_difference, same.max_difference), (0.0, 0.0));
        let shifted = compare_curves(&a, &b, 1000).unwrap();
        assert!((shifted.mean_difference - 0.10).abs() < 1e-9);
        let mut c = step_curve(0.0);
        c.points = vec![(1e30, 0.0), (1e31, 1.0)];
        assert!(compare_curves(&a, &c, 10).is_err());
    }

    #[test]
    fn curve_counts_multiplicity_and_unscorable() {
        let g = |x: f64| Some(GuessEstimate {
            guess_number: x,
            standard_error: 0.0,
        });
        let guesses = vec![g(5.0), g(5.0), g(1e3), None];
        let curve = curve_from_guesses(&guesses, &[1.0, 10.0, 1e3, 1e20]).unwrap();
        let cov: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
        assert_eq!(cov, vec![0.0, 0.5, 0.75, 0.75]);
        assert_eq!(curve.unscorable, 1);
        assert!(curve_from_guesses(&guesses, &[10.0, 1.0]).is_err());
    }

    #[test]
    fn curve_text_round_trip() {
        let mut c = step_curve(0.0);
        c.meta.model_id = "m".into();
        c.meta.n = 42;
        let back = GuessingCurve::from_text(&c.to_text()).unwrap();
        assert_eq!(back.meta, c.meta);
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a.0 / b.0 - 1.0).abs() < 1e-12 && a.1 == b.1);
        }
    }

    #[test]
    fn interpolation_is_flat_outside() {
        let c = step_curve(0.0);
        assert_eq!(c.coverage_at(0.1), 0.0);
        assert_eq!(c.coverage_at(1e25), 0.5);
        assert!((c.coverage_at(10f64.powf(2.5)) - 2.5 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn finite_model_sampling() {
        let m = FiniteModel::new(vec![(b"a".to_vec(), 3.0), (b"b".to_vec(), 1.0)]).unwrap();
        assert!((m.probability(b"a") - 0.75).abs() < 1e-15);
        assert_eq!(m.log_prob(b"zz").unwrap(), f64::NEG_INFINITY);
        let s = m.sample(4000, 1).unwrap();
        assert_eq!(s, m.sample(4000, 1).unwrap());
        let frac = s.iter().filter(|s| s.password == b"a").count() as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / 4000.0).sqrt());
    }
}
