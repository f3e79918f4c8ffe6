use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{parameter_count, ModelConfig};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Embedding,
    Matrix,
    Bias,
    NormGain,
    NormShift,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }

    /// Layer-norm parameters.
    pub fn is_norm(&self) -> bool {
        matches!(self.kind, TensorKind::NormGain | TensorKind::NormShift)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Flat parameter layout: every tensor is a contiguous slice of one buffer.
/// Linear weights are stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) wte: usize,
    pub(crate) wpe: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head: Option<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, p, e, i) = (cfg.vocab_size, cfg.max_positions, cfg.embed_dim, cfg.intermediate_dim);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                kind,
                offset,
            });
            offset
        };
        use TensorKind::*;
        let wte = push("wte".into(), vec![v, e], Embedding);
        let wpe = push("wpe".into(), vec![p, e], Embedding);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("h.{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: push(n("ln1.g"), vec![e], NormGain),
                ln1_b: push(n("ln1.b"), vec![e], NormShift),
                wq: push(n("attn.wq"), vec![e, e], Matrix),
                bq: push(n("attn.bq"), vec![e], Bias),
                wk: push(n("attn.wk"), vec![e, e], Matrix),
                bk: push(n("attn.bk"), vec![e], Bias),
                wv: push(n("attn.wv"), vec![e, e], Matrix),
                bv: push(n("attn.bv"), vec![e], Bias),
                wo: push(n("attn.wo"), vec![e, e], Matrix),
                bo: push(n("attn.bo"), vec![e], Bias),
                ln2_g: push(n("ln2.g"), vec![e], NormGain),
                ln2_b: push(n("ln2.b"), vec![e], NormShift),
                w1: push(n("mlp.w1"), vec![e, i], Matrix),
                b1: push(n("mlp.b1"), vec![i], Bias),
                w2: push(n("mlp.w2"), vec![i, e], Matrix),
                b2: push(n("mlp.b2"), vec![e], Bias),
            });
        }
        let lnf_g = push("lnf.g".into(), vec![e], NormGain);
        let lnf_b = push("lnf.b".into(), vec![e], NormShift);
        let head = (!cfg.tie_output_embedding).then(|| push("head".into(), vec![v, e], Matrix));
        Self {
            tensors,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            head,
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Offset of the `[vocab, embed]` matrix used by the output head.
    pub(crate) fn output_matrix(&self) -> usize {
        self.head.unwrap_or(self.wte)
    }
}

/// Decoder parameters `θ` in one flat buffer described by `layout`.
#[derive(Clone, Debug)]
pub struct DecoderWeights<T> {
    pub(crate) config: ModelConfig,
    pub(crate) layout: ParamLayout,
    pub(crate) params: Vec<T>,
}

impl<T: Scalar> DecoderWeights<T> {
    /// All-zero parameters with layer-norm gains at one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total()];
        for t in layout.tensors.iter().filter(|t| t.kind == TensorKind::NormGain) {
            params[t.range()].fill(T::one());
        }
        let w = Self {
            config,
            layout,
            params,
        };
        w.check_count()?;
        Ok(w)
    }

    /// Normal(0, 0.02) embeddings and matrices, zero biases, unit gains.
    /// Values are drawn in f32 so that f32 and f64 decoders with the same
    /// seed hold identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
        for t in &w.layout.tensors {
            if matches!(t.kind, TensorKind::Embedding | TensorKind::Matrix) {
                for v in &mut w.params[t.range()] {
                    *v = T::of(normal.sample(&mut rng) as f64);
                }
            }
        }
        Ok(w)
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Mismatch(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        let w = Self {
            config,
            layout,
            params,
        };
        w.check_count()?;
        Ok(w)
    }

    fn check_count(&self) -> Result<()> {
        let materialized: usize = self.layout.tensors.iter().map(|t| t.numel()).sum();
        let expected = parameter_count(&self.config);
        if materialized != expected || self.params.len() != expected {
            return Err(Error::Mismatch(format!(
                "layout materializes {materialized} parameters, closed form gives {expected}"
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.params[range])
    }

    /// Element-type conversion (rounds when narrowing).
    pub fn cast<U: Scalar>(&self) -> DecoderWeights<U> {
        DecoderWeights {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }
}
