//! Password strength meter bundles: quantized decoder weights plus the
//! Monte Carlo table needed to turn a log-probability into a guess number,
//! and the tools to calibrate and evaluate them against a reference oracle.
//!
//! Bundle bytes:
//!
//! ```text
//! "PSMB" | u32 version | u32 manifest length | manifest (JSON, sorted keys,
//! no whitespace) | tensor payload | estimator table
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in manifest
//! order as `f32`, `f16` or `i8` per their `dtype`; an `i8` tensor
//! dequantizes to `code * scale`. The estimator table is `table_len` f32
//! log-probabilities (descending), `table_len + 1` cumulative guess counts
//! and `table_len + 1` standard errors. A zipped bundle is the gzip stream
//! of these bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::mc_estimator::{EstimatorMeta, MonteCarloEstimator};
use crate::model::checkpoint::read_u32;
use crate::model::{DecoderWeights, ModelConfig};
use crate::tokenizer::vocabulary;

pub const BUNDLE_MAGIC: &[u8; 4] = b"PSMB";
pub const BUNDLE_VERSION: u32 = 1;
/// Highest decade bin: guess numbers of 10^20 and beyond.
pub const MAX_BIN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Self::Fp32),
            "fp16" => Ok(Self::Fp16),
            "int8" => Ok(Self::Int8),
            other => Err(Error::Config(format!("unknown precision {other:?} (fp32, fp16 or int8)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizationMode {
    pub kind: Precision,
    pub zip: bool,
}

/// Round half away from zero.
fn round_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

/// Symmetric per-tensor int8: `scale = max|w| / 127`. An all-zero tensor
/// gets scale 0 and all-zero codes.
pub fn quantize_int8(values: &[f32]) -> (Vec<i8>, f32) {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return (vec![0; values.len()], 0.0);
    }
    let codes = values
        .iter()
        .map(|&v| round_away(v as f64 * 127.0 / max as f64).clamp(-127.0, 127.0) as i8)
        .collect();
    (codes, max / 127.0)
}

pub fn dequantize_int8(codes: &[i8], scale: f32) -> Vec<f32> {
    codes.iter().map(|&c| c as f32 * scale).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// `f32`, `f16` or `i8`.
    pub dtype: String,
    /// Byte offset into the tensor payload.
    pub offset: usize,
    pub scale: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorInfo {
    pub model_id: String,
    pub n: usize,
    pub seed: u64,
    pub table_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub quantization: QuantizationMode,
    pub tensors: Vec<BundleTensor>,
    pub payload_bytes: usize,
    /// Guess numbers are divided by this before reporting.
    pub scaling_factor: f64,
    pub estimator: EstimatorInfo,
}

#[derive(Clone, Debug)]
pub struct PsmBundle {
    manifest: BundleManifest,
    payload: Vec<u8>,
    estimator: MonteCarloEstimator,
    weights: DecoderWeights<f32>,
}

impl PartialEq for PsmBundle {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.payload == other.payload && self.estimator == other.estimator
    }
}

fn tensor_bytes(dtype: &str, numel: usize) -> Result<usize> {
    match dtype {
        "f32" => Ok(numel * 4),
        "f16" => Ok(numel * 2),
        "i8" => Ok(numel),
        other => Err(Error::Format(format!("unknown tensor dtype {other:?}"))),
    }
}

fn decode_payload(manifest: &BundleManifest, payload: &[u8]) -> Result<DecoderWeights<f32>> {
    let mut w = DecoderWeights::<f32>::zeros(manifest.config.clone())?;
    let specs = w.layout().tensors.clone();
    if specs.len() != manifest.tensors.len() {
        return Err(Error::Mismatch("bundle tensor directory does not match the configuration".into()));
    }
    let mut expected_offset = 0;
    for (spec, t) in specs.iter().zip(&manifest.tensors) {
        if spec.name != t.name || spec.shape != t.shape || t.offset != expected_offset {
            return Err(Error::Mismatch(format!("bundle tensor {} does not match the layout", t.name)));
        }
        let len = tensor_bytes(&t.dtype, spec.numel())?;
        let bytes = payload
            .get(t.offset..t.offset + len)
            .ok_or_else(|| Error::Format(format!("payload truncated in tensor {}", t.name)))?;
        let out = &mut w.params_mut()[spec.range()];
        match t.dtype.as_str() {
            "f32" => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = f32::from_le_bytes(c.try_into().unwrap());
                }
            }
            "f16" => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = f16::from_le_bytes(c.try_into().unwrap()).to_f32();
                }
            }
            _ => {
                let scale = t
                    .scale
                    .ok_or_else(|| Error::Format(format!("int8 tensor {} has no scale", t.name)))?;
                for (o, &b) in out.iter_mut().zip(bytes) {
                    *o = b as i8 as f32 * scale;
                }
            }
        }
        expected_offset += len;
    }
    if expected_offset != payload.len() {
        return Err(Error::Format("tensor payload length disagrees with the directory".into()));
    }
    Ok(w)
}

impl PsmBundle {
    /// Quantizes every tensor except layer-norm parameters, which stay f32.
    pub fn build(w: &DecoderWeights<f32>, mode: QuantizationMode, estimator: MonteCarloEstimator) -> Result<Self> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for spec in &w.layout().tensors {
            let values = &w.params()[spec.range()];
            let offset = payload.len();
            let kind = if spec.is_norm() { Precision::Fp32 } else { mode.kind };
            let (dtype, scale) = match kind {
                Precision::Fp32 => {
                    for v in values {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    ("f32", None)
                }
                Precision::Fp16 => {
                    for v in values {
                        payload.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                    }
                    ("f16", None)
                }
                Precision::Int8 => {
                    let (codes, scale) = quantize_int8(values);
                    payload.extend(codes.iter().map(|&c| c as u8));
                    ("i8", Some(scale))
                }
            };
            tensors.push(BundleTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                dtype: dtype.into(),
                offset,
                scale,
            });
        }
        let meta = estimator.meta();
        let manifest = BundleManifest {
            format_version: BUNDLE_VERSION,
            config: w.config().clone(),
            vocabulary: vocabulary(),
            quantization: mode,
            tensors,
            payload_bytes: payload.len(),
            scaling_factor: 1.0,
            estimator: EstimatorInfo {
                model_id: meta.model_id.clone(),
                n: meta.n,
                seed: meta.seed,
                table_len: estimator.table_len(),
            },
        };
        let weights = decode_payload(&manifest, &payload)?;
        Ok(Self {
            manifest,
            payload,
            estimator,
            weights,
        })
    }

    pub fn manifest(&self) -> &BundleManifest {
        &self.manifest
    }

    pub fn estimator(&self) -> &MonteCarloEstimator {
        &self.estimator
    }

    /// Dequantized weights used for scoring.
    pub fn weights(&self) -> &DecoderWeights<f32> {
        &self.weights
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn scaling_factor(&self) -> f64 {
        self.manifest.scaling_factor
    }

    pub fn set_scaling_factor(&mut self, f: f64) -> Result<()> {
        if !(f >= 1.0 && f.is_finite()) {
            return Err(Error::Config(format!("scaling factor must be a finite value >= 1, got {f}")));
        }
        self.manifest.scaling_factor = f;
        Ok(())
    }

    fn manifest_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&serde_json::to_value(&self.manifest)?)?)
    }

    /// Uncompressed bundle bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = self.manifest_json()?;
        let table = self.estimator.table_bytes();
        let mut out = Vec::with_capacity(12 + json.len() + self.payload.len() + table.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&table);
        Ok(out)
    }

    /// Bytes as written to disk: gzip-compressed when the mode says zip.
    pub fn to_file_bytes(&self) -> Result<Vec<u8>> {
        let raw = self.to_bytes()?;
        if !self.manifest.quantization.zip {
            return Ok(raw);
        }
        let mut enc = GzEncoder::new(Vec::new(), Compression::best());
        enc.write_all(&raw)?;
        Ok(enc.finish()?)
    }

    /// Accepts plain or gzip-compressed bundle bytes.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(&[0x1f, 0x8b]) {
            let mut raw = Vec::new();
            GzDecoder::new(bytes)
                .read_to_end(&mut raw)
                .map_err(|e| Error::Format(format!("bad gzip stream: {e}")))?;
            return Self::parse_raw(&raw);
        }
        Self::parse_raw(bytes)
    }

    fn parse_raw(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(BUNDLE_MAGIC.as_slice()) {
            return Err(Error::Format("not a strength-meter bundle (bad magic)".into()));
        }
        let version = read_u32(bytes, 4)?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let len = read_u32(bytes, 8)? as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated bundle manifest".into()))?;
        let manifest: BundleManifest = serde_json::from_slice(json)?;
        if manifest.vocabulary != vocabulary() {
            return Err(Error::Mismatch("bundle vocabulary differs from this build".into()));
        }
        let start = 12 + len;
        let payload = bytes
            .get(start..start + manifest.payload_bytes)
            .ok_or_else(|| Error::Format("truncated tensor payload".into()))?
            .to_vec();
        let info = &manifest.estimator;
        let estimator = MonteCarloEstimator::from_table_bytes(
            EstimatorMeta {
                model_id: info.model_id.clone(),
                n: info.n,
                seed: info.seed,
            },
            info.table_len,
            &bytes[start + manifest.payload_bytes..],
        )?;
        let weights = decode_payload(&manifest, &payload)?;
        Ok(Self {
            manifest,
            payload,
            estimator,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Unscaled guess-number estimate and standard error for `pw`.
    pub fn raw_estimate(&self, pw: &[u8]) -> Result<(f64, f64)> {
        let lp = self.weights.log_prob(pw)?;
        let e = self.estimator.estimate(lp);
        Ok((e.guess_number, e.standard_error))
    }
}

/// Decade bin of a guess number: `floor(log10 g)` clamped to `[0, 20]`.
pub fn decade_bin(g: f64) -> usize {
    if !(g >= 10.0) {
        return 0;
    }
    (g.log10().floor() as usize).min(MAX_BIN)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthReport {
    /// Scaled estimate, at least 1.
    pub guess_number: f64,
    pub log10_guess_number: f64,
    pub bin: usize,
    pub standard_error: f64,
}

fn scaled(raw: f64, se: f64, f: f64) -> StrengthReport {
    let g = (raw / f).max(1.0);
    StrengthReport {
        guess_number: g,
        log10_guess_number: g.log10(),
        bin: decade_bin(g),
        standard_error: se / f,
    }
}

pub fn psm_strength(b: &PsmBundle, pw: &[u8]) -> Result<StrengthReport> {
    let (raw, se) = b.raw_estimate(pw)?;
    Ok(scaled(raw, se, b.scaling_factor()))
}

/// The smallest guess number across models.
pub fn min_guess(estimates: &[(String, f64)]) -> Result<f64> {
    estimates
        .iter()
        .map(|e| e.1)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Config("min_guess needs at least one estimate".into()))
}

/// Per-password minimum over several models' estimates. `None` where no
/// model could score the password.
pub fn min_guess_table(per_model: &[Vec<Option<f64>>]) -> Result<Vec<Option<f64>>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Config("min_guess needs at least one model".into()))?;
    if per_model.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Mismatch("models scored different numbers of passwords".into()));
    }
    Ok((0..first.len())
        .map(|i| per_model.iter().filter_map(|m| m[i]).min_by(f64::total_cmp))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    /// `counts[oracle_bin][psm_bin]`.
    pub counts: Vec<Vec<usize>>,
    pub safe: usize,
    pub unsafe_errors: usize,
    pub accurate: usize,
    pub total: usize,
}

impl ErrorMatrix {
    pub fn from_bins(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = ErrorMatrix {
            counts: vec![vec![0; MAX_BIN + 1]; MAX_BIN + 1],
            safe: 0,
            unsafe_errors: 0,
            accurate: 0,
            total: 0,
        };
        for (o, p) in pairs {
            m.counts[o][p] += 1;
            m.total += 1;
            match p.cmp(&o) {
                std::cmp::Ordering::Less => m.safe += 1,
                std::cmp::Ordering::Greater => m.unsafe_errors += 1,
                std::cmp::Ordering::Equal => m.accurate += 1,
            }
        }
        m
    }

    pub fn safe_rate(&self) -> f64 {
        self.safe as f64 / self.total as f64
    }

    pub fn unsafe_rate(&self) -> f64 {
        self.unsafe_errors as f64 / self.total as f64
    }

    pub fn accurate_rate(&self) -> f64 {
        self.accurate as f64 / self.total as f64
    }
}

fn check_oracle(oracle: &[Option<f64>], n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|i| oracle.get(i).copied().flatten().ok_or(Error::MissingOracle(i)))
        .collect()
}

/// Unscaled PSM estimates for every test password, in test order.
pub fn raw_estimates(b: &PsmBundle, test: &Corpus) -> Result<Vec<f64>> {
    test.passwords()
        .par_iter()
        .map(|pw| b.raw_estimate(pw).map(|e| e.0))
        .collect()
}

fn matrix_at(raw: &[f64], oracle: &[f64], f: f64) -> ErrorMatrix {
    ErrorMatrix::from_bins(
        raw.iter()
            .zip(oracle)
            .map(|(&r, &o)| (decade_bin(o), scaled(r, 0.0, f).bin)),
    )
}

/// PSM (at its scaling factor) against the oracle over `test`.
pub fn error_matrix(b: &PsmBundle, oracle: &[Option<f64>], test: &Corpus) -> Result<ErrorMatrix> {
    let oracle = check_oracle(oracle, test.len())?;
    let raw = raw_estimates(b, test)?;
    Ok(matrix_at(&raw, &oracle, b.scaling_factor()))
}

/// Safe-error count of precomputed raw estimates at factor `f`.
pub fn safe_errors_at(raw: &[f64], oracle: &[f64], f: f64) -> usize {
    matrix_at(raw, oracle, f).safe
}

/// Smallest integer factor `f >= 1` whose safe-error count reaches
/// `reference_safe_count`, found by doubling then bisection over raw
/// estimates and oracle values.
pub fn calibrate_factor(raw: &[f64], oracle: &[f64], reference_safe_count: usize) -> Result<f64> {
    if reference_safe_count > raw.len() {
        return Err(Error::Config(format!(
            "reference of {reference_safe_count} safe errors exceeds the {} evaluation passwords",
            raw.len()
        )));
    }
    let reached = |f: f64| safe_errors_at(raw, oracle, f) >= reference_safe_count;
    if reached(1.0) {
        return Ok(1.0);
    }
    // Beyond this every scaled estimate sits in bin 0.
    let ceiling = raw.iter().copied().filter(|r| r.is_finite()).fold(1.0f64, f64::max) * 10.0;
    let mut hi = 2.0f64;
    while !reached(hi) {
        if hi > ceiling || !hi.is_finite() {
            return Err(Error::Unreachable {
                target: reference_safe_count,
                achieved: safe_errors_at(raw, oracle, hi),
                factor: hi,
            });
        }
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    while hi - lo > 1.0 {
        let mid = ((lo + hi) / 2.0).floor();
        if reached(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Finds the factor for `psm` over `test` and writes it into the bundle.
pub fn calibrate_scaling(
    psm: &mut PsmBundle,
    oracle: &[Option<f64>],
    test: &Corpus,
    reference_safe_count: usize,
) -> Result<f64> {
    let oracle = check_oracle(oracle, test.len())?;
    let raw = raw_estimates(psm, test)?;
    let f = calibrate_factor(&raw, &oracle, reference_safe_count)?;
    psm.set_scaling_factor(f)?;
    Ok(f)
}
