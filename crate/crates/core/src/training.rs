//! Maximum-likelihood training of the decoder: pretraining from a seeded
//! initialization and finetuning from an existing checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{checkpoint, DecoderWeights, ModelConfig, Scalar, TensorKind};
use crate::tokenizer::{encode, TokenId};

/// Gradient accumulation buffers per step. Fixed so the reduction order does
/// not depend on the thread count.
const GRAD_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the peak rate, then linear decay to a tenth of it.
    LinearWarmupDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// `None`: 1% of all steps, at least one.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainingConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            learning_rate: 5e-4,
            lr_schedule: LrSchedule::LinearWarmupDecay,
            warmup_steps: None,
            weight_decay: 0.01,
            seed: 0,
            mode: Mode::Pretrain,
        }
    }

    pub fn finetune() -> Self {
        Self {
            learning_rate: 5e-5,
            mode: Mode::Finetune,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let peak = self.learning_rate;
        match self.lr_schedule {
            LrSchedule::Constant => peak,
            LrSchedule::LinearWarmupDecay => {
                let warmup = self
                    .warmup_steps
                    .unwrap_or_else(|| (total as f64 * 0.01).round() as usize)
                    .max(1);
                if step < warmup {
                    peak * (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let frac = ((step - warmup) as f64 / span).min(1.0);
                    peak * (1.0 - 0.9 * frac)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean nats per predicted token over the batch.
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean nats per predicted token, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub wall_clock_secs: f64,
    pub records: Vec<StepRecord>,
    /// Held-out cross-entropy before and after finetuning.
    pub eval_before: Option<f64>,
    pub eval_after: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainingReport {
    /// One JSON object per step, then a summary line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "epoch_losses": self.epoch_losses,
            "steps": self.steps,
            "wall_clock_secs": self.wall_clock_secs,
            "eval_before": self.eval_before,
            "eval_after": self.eval_after,
            "checkpoint": self.checkpoint,
        });
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn encode_all(w_cfg: &ModelConfig, data: &Corpus) -> Result<Vec<Vec<TokenId>>> {
    let limit = w_cfg.max_password_len();
    data.iter()
        .map(|pw| {
            if pw.len() > limit {
                return Err(Error::Bounds(format!(
                    "training password of length {} exceeds the model limit of {limit}",
                    pw.len()
                )));
            }
            encode(pw)
        })
        .collect()
}

/// Mean per-token negative log-likelihood of `data` in eval mode.
pub fn cross_entropy<T: Scalar>(w: &DecoderWeights<T>, data: &Corpus) -> Result<f64> {
    let seqs = encode_all(w.config(), data)?;
    let parts: Vec<(f64, usize)> = seqs.par_iter().map(|s| w.sequence_nll(s)).collect::<Result<_>>()?;
    let (nll, count) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok(nll / count as f64)
}

/// Mean per-token negative log-likelihood of `passwords` and its gradient
/// with respect to every parameter, without dropout.
pub fn loss_and_gradient<T: Scalar>(w: &DecoderWeights<T>, passwords: &[Vec<u8>]) -> Result<(f64, Vec<T>)> {
    let seqs: Vec<Vec<TokenId>> = passwords.iter().map(|p| encode(p)).collect::<Result<_>>()?;
    let count: usize = seqs.iter().map(|s| s.len() - 1).sum();
    let mut grad = vec![T::zero(); w.num_params()];
    let mut nll = 0.0;
    for s in &seqs {
        nll += w.accumulate_grad(s, &mut grad, 1.0 / count as f64, None)?;
    }
    Ok((nll / count as f64, grad))
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new<T: Scalar>(w: &DecoderWeights<T>) -> Self {
        let mut decay = vec![false; w.num_params()];
        for t in w.layout().tensors.iter().filter(|t| t.kind == TensorKind::Matrix) {
            decay[t.range()].fill(true);
        }
        Self {
            m: vec![0.0; w.num_params()],
            v: vec![0.0; w.num_params()],
            decay,
            t: 0,
        }
    }

    fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i].as_f64();
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mut p = params[i].as_f64();
            if self.decay[i] {
                p -= lr * weight_decay * p;
            }
            p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            params[i] = T::of(p);
        }
    }
}

fn dropout_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index as u64);
    rng
}

/// Runs `tc.epochs` of minibatch AdamW over `data`, updating `w` in place.
pub fn train<T: Scalar>(w: &mut DecoderWeights<T>, data: &Corpus, tc: &TrainingConfig) -> Result<TrainingReport> {
    tc.validate()?;
    if data.len() < tc.batch_size {
        return Err(Error::Config(format!(
            "corpus of {} passwords is smaller than one batch of {}",
            data.len(),
            tc.batch_size
        )));
    }
    let seqs = encode_all(w.config(), data)?;
    let started = Instant::now();
    let steps_per_epoch = seqs.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let use_dropout = w.config().attention_dropout > 0.0;
    let mut opt = AdamW::new(w);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut report = TrainingReport::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut epoch_nll, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let count: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            let scale = 1.0 / count as f64;
            let chunk_len = batch.len().div_ceil(GRAD_CHUNKS);
            let weights = &*w;
            let parts: Vec<(f64, Vec<T>)> = batch
                .par_chunks(chunk_len)
                .enumerate()
                .map(|(c, idx)| {
                    let mut grad = vec![T::zero(); weights.num_params()];
                    let mut nll = 0.0;
                    for (j, &i) in idx.iter().enumerate() {
                        let mut rng = dropout_rng(tc.seed, step, c * chunk_len + j);
                        nll += weights.accumulate_grad(&seqs[i], &mut grad, scale, use_dropout.then_some(&mut rng))?;
                    }
                    Ok((nll, grad))
                })
                .collect::<Result<_>>()?;
            let mut iter = parts.into_iter();
            let (mut nll, mut grad) = iter.next().expect("non-empty batch");
            for (n, g) in iter {
                nll += n;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            let lr = tc.lr_at(step, total);
            opt.step(w.params_mut(), &grad, lr, tc.weight_decay);
            epoch_nll += nll;
            epoch_count += count;
            report.records.push(StepRecord {
                epoch,
                step,
                loss: nll / count as f64,
                lr,
                timestamp: now(),
            });
            step += 1;
        }
        report.epoch_losses.push(epoch_nll / epoch_count as f64);
    }
    report.steps = step;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

pub fn pretrain(cfg: &ModelConfig, data: &Corpus, tc: &TrainingConfig) -> Result<(DecoderWeights<f32>, TrainingReport)> {
    if tc.mode != Mode::Pretrain {
        return Err(Error::Config("pretrain called with a finetune configuration".into()));
    }
    let mut w = DecoderWeights::<f32>::init(cfg.clone(), tc.seed)?;
    let report = train(&mut w, data, tc)?;
    Ok((w, report))
}

/// Continues training `base` on `data`. With `eval`, the report carries
/// held-out cross-entropy before and after.
pub fn finetune(
    mut base: DecoderWeights<f32>,
    data: &Corpus,
    tc: &TrainingConfig,
    eval: Option<&Corpus>,
) -> Result<(DecoderWeights<f32>, TrainingReport)> {
    if tc.mode != Mode::Finetune {
        return Err(Error::Config("finetune called with a pretrain configuration".into()));
    }
    let before = eval.map(|e| cross_entropy(&base, e)).transpose()?;
    let mut report = train(&mut base, data, tc)?;
    report.eval_before = before;
    report.eval_after = eval.map(|e| cross_entropy(&base, e)).transpose()?;
    Ok((base, report))
}

/// [`finetune`] from a checkpoint file. With `expected`, the checkpoint's
/// configuration must match it.
pub fn finetune_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
    data: &Corpus,
    tc: &TrainingConfig,
    eval: Option<&Corpus>,
) -> Result<(DecoderWeights<f32>, TrainingReport)> {
    let base = match expected {
        Some(cfg) => checkpoint::load_matching::<f32>(path, cfg)?,
        None => checkpoint::load::<f32>(path)?,
    };
    finetune(base, data, tc, eval)
}
