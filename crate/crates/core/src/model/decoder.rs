//! Forward and backward passes of the causal decoder, exact scoring and
//! ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{
    add_bias, bias_grad, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax_row, matmul,
    matmul_at_acc, matmul_bt,
};
use super::scalar::Scalar;
use super::weights::DecoderWeights;
use crate::error::{Error, Result};
use crate::mc_estimator::{PasswordModel, Sample, SampleStatus};
use crate::tokenizer::{encode, id_char, TokenId, EOS, SOS};

/// Additive attention mask: `0` where query `i` may attend key `j` (`i >= j`),
/// `-inf` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMask {
    size: usize,
    values: Vec<f64>,
}

impl CausalMask {
    pub fn new(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            for j in (i + 1)..size {
                values[i * size + j] = f64::NEG_INFINITY;
            }
        }
        Self { size, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

#[derive(Default)]
struct LayerTape<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    ln1_out: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[heads, n, n]` softmax outputs, zero above the diagonal.
    probs: Vec<T>,
    /// Inverted-dropout multipliers matching `probs`; empty in eval mode.
    keep: Vec<T>,
    attn_y: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    ln2_out: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
}

/// Activations retained by a forward pass for backpropagation.
pub(crate) struct Tape<T> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerTape<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    lnf_out: Vec<T>,
    pub(crate) logits: Vec<T>,
}

impl<T: Scalar> DecoderWeights<T> {
    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Bounds("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_positions {
            return Err(Error::Bounds(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                cfg.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Bounds(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    pub(crate) fn forward_tape(&self, tokens: &[TokenId], mut dropout: Option<&mut ChaCha8Rng>) -> Result<Tape<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let (n, e, inter, heads) = (tokens.len(), cfg.embed_dim, cfg.intermediate_dim, cfg.heads);
        let hd = cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let p_drop = cfg.attention_dropout;
        let keep_scale = T::of(1.0 / (1.0 - p_drop));

        let mut x = vec![T::zero(); n * e];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = self.slice(lay.wte + tok as usize * e, e);
            let pe = self.slice(lay.wpe + t * e, e);
            for ((o, &a), &b) in x[t * e..(t + 1) * e].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        let mut scores = vec![T::zero(); n];
        for b in &lay.blocks {
            let mut lt = LayerTape {
                ln1_xhat: vec![T::zero(); n * e],
                ln1_rstd: vec![T::zero(); n],
                ln1_out: vec![T::zero(); n * e],
                q: vec![T::zero(); n * e],
                k: vec![T::zero(); n * e],
                v: vec![T::zero(); n * e],
                probs: vec![T::zero(); heads * n * n],
                keep: Vec::new(),
                attn_y: vec![T::zero(); n * e],
                ln2_xhat: vec![T::zero(); n * e],
                ln2_rstd: vec![T::zero(); n],
                ln2_out: vec![T::zero(); n * e],
                fc_pre: vec![T::zero(); n * inter],
                fc_act: vec![T::zero(); n * inter],
            };
            layer_norm(
                &mut lt.ln1_out,
                &mut lt.ln1_xhat,
                &mut lt.ln1_rstd,
                &x,
                self.slice(b.ln1_g, e),
                self.slice(b.ln1_b, e),
            );
            for (out, w, bias) in [(&mut lt.q, b.wq, b.bq), (&mut lt.k, b.wk, b.bk), (&mut lt.v, b.wv, b.bv)] {
                matmul(out, &lt.ln1_out, self.slice(w, e * e), n, e, e, false);
                add_bias(out, self.slice(bias, e));
            }
            if dropout.is_some() && p_drop > 0.0 {
                lt.keep = vec![T::zero(); heads * n * n];
            }
            for h in 0..heads {
                let col = h * hd;
                for t in 0..n {
                    let qt = &lt.q[t * e + col..t * e + col + hd];
                    let mut max = T::neg_infinity();
                    for s in 0..=t {
                        let ks = &lt.k[s * e + col..s * e + col + hd];
                        let dot: T = qt.iter().zip(ks).map(|(&a, &b)| a * b).sum();
                        scores[s] = dot * scale;
                        max = max.max(scores[s]);
                    }
                    let row = &mut lt.probs[(h * n + t) * n..(h * n + t) * n + n];
                    let mut sum = T::zero();
                    for s in 0..=t {
                        row[s] = (scores[s] - max).exp();
                        sum += row[s];
                    }
                    let inv = sum.recip();
                    for p in &mut row[..=t] {
                        *p *= inv;
                    }
                    if !lt.keep.is_empty() {
                        let rng = dropout.as_deref_mut().expect("dropout rng");
                        let keep_row = &mut lt.keep[(h * n + t) * n..(h * n + t) * n + n];
                        for k in &mut keep_row[..=t] {
                            *k = if rng.random::<f64>() < p_drop { T::zero() } else { keep_scale };
                        }
                    }
                    let y = &mut lt.attn_y[t * e + col..t * e + col + hd];
                    for s in 0..=t {
                        let mut p = row[s];
                        if !lt.keep.is_empty() {
                            p *= lt.keep[(h * n + t) * n + s];
                        }
                        let vs = &lt.v[s * e + col..s * e + col + hd];
                        for (o, &vv) in y.iter_mut().zip(vs) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let mut proj = vec![T::zero(); n * e];
            matmul(&mut proj, &lt.attn_y, self.slice(b.wo, e * e), n, e, e, false);
            add_bias(&mut proj, self.slice(b.bo, e));
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += *pv;
            }

            layer_norm(
                &mut lt.ln2_out,
                &mut lt.ln2_xhat,
                &mut lt.ln2_rstd,
                &x,
                self.slice(b.ln2_g, e),
                self.slice(b.ln2_b, e),
            );
            matmul(&mut lt.fc_pre, &lt.ln2_out, self.slice(b.w1, e * inter), n, e, inter, false);
            add_bias(&mut lt.fc_pre, self.slice(b.b1, inter));
            for (a, &p) in lt.fc_act.iter_mut().zip(&lt.fc_pre) {
                *a = gelu(p);
            }
            matmul(&mut proj, &lt.fc_act, self.slice(b.w2, inter * e), n, inter, e, false);
            add_bias(&mut proj, self.slice(b.b2, e));
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += *pv;
            }
            layers.push(lt);
        }

        let mut tape = Tape {
            tokens: tokens.to_vec(),
            layers,
            lnf_xhat: vec![T::zero(); n * e],
            lnf_rstd: vec![T::zero(); n],
            lnf_out: vec![T::zero(); n * e],
            logits: vec![T::zero(); n * cfg.vocab_size],
        };
        layer_norm(
            &mut tape.lnf_out,
            &mut tape.lnf_xhat,
            &mut tape.lnf_rstd,
            &x,
            self.slice(lay.lnf_g, e),
            self.slice(lay.lnf_b, e),
        );
        matmul_bt(
            &mut tape.logits,
            &tape.lnf_out,
            self.slice(lay.output_matrix(), cfg.vocab_size * e),
            n,
            e,
            cfg.vocab_size,
            false,
        );
        Ok(tape)
    }

    /// Accumulates `d(loss)/d(theta)` into `grad` given `d(loss)/d(logits)`.
    pub(crate) fn backward(&self, tape: &Tape<T>, dlogits: &[T], grad: &mut [T]) {
        let cfg = &self.config;
        let lay = &self.layout;
        let (n, e, inter, heads, vocab) = (
            tape.tokens.len(),
            cfg.embed_dim,
            cfg.intermediate_dim,
            cfg.heads,
            cfg.vocab_size,
        );
        let hd = cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let out_off = lay.output_matrix();

        let mut dz = vec![T::zero(); n * e];
        matmul(&mut dz, dlogits, self.slice(out_off, vocab * e), n, vocab, e, false);
        matmul_at_acc(&mut grad[out_off..out_off + vocab * e], dlogits, &tape.lnf_out, n, vocab, e);

        let mut dx = vec![T::zero(); n * e];
        {
            let (g_part, b_part) = grad.split_at_mut(lay.lnf_b);
            layer_norm_backward(
                &mut dx,
                &mut g_part[lay.lnf_g..lay.lnf_g + e],
                &mut b_part[..e],
                &dz,
                &tape.lnf_xhat,
                &tape.lnf_rstd,
                self.slice(lay.lnf_g, e),
            );
        }

        let mut dbuf = vec![T::zero(); n * e];
        let mut dact = vec![T::zero(); n * inter];
        for (b, lt) in lay.blocks.iter().zip(&tape.layers).rev() {
            // feed-forward sublayer
            bias_grad(&mut grad[b.b2..b.b2 + e], &dx);
            matmul_at_acc(&mut grad[b.w2..b.w2 + inter * e], &lt.fc_act, &dx, n, inter, e);
            matmul_bt(&mut dact, &dx, self.slice(b.w2, inter * e), n, e, inter, false);
            for (d, &pre) in dact.iter_mut().zip(&lt.fc_pre) {
                *d *= gelu_grad(pre);
            }
            bias_grad(&mut grad[b.b1..b.b1 + inter], &dact);
            matmul_at_acc(&mut grad[b.w1..b.w1 + e * inter], &lt.ln2_out, &dact, n, e, inter);
            matmul_bt(&mut dbuf, &dact, self.slice(b.w1, e * inter), n, inter, e, false);
            {
                let (g_part, b_part) = grad.split_at_mut(b.ln2_b);
                layer_norm_backward(
                    &mut dx,
                    &mut g_part[b.ln2_g..b.ln2_g + e],
                    &mut b_part[..e],
                    &dbuf,
                    &lt.ln2_xhat,
                    &lt.ln2_rstd,
                    self.slice(b.ln2_g, e),
                );
            }

            // attention sublayer
            bias_grad(&mut grad[b.bo..b.bo + e], &dx);
            matmul_at_acc(&mut grad[b.wo..b.wo + e * e], &lt.attn_y, &dx, n, e, e);
            let mut dy = vec![T::zero(); n * e];
            matmul_bt(&mut dy, &dx, self.slice(b.wo, e * e), n, e, e, false);

            let mut dq = vec![T::zero(); n * e];
            let mut dk = vec![T::zero(); n * e];
            let mut dv = vec![T::zero(); n * e];
            let mut dp = vec![T::zero(); n];
            for h in 0..heads {
                let col = h * hd;
                for t in 0..n {
                    let base = (h * n + t) * n;
                    let row = &lt.probs[base..base + n];
                    let dyt = &dy[t * e + col..t * e + col + hd];
                    for s in 0..=t {
                        let vs = &lt.v[s * e + col..s * e + col + hd];
                        let mut d: T = dyt.iter().zip(vs).map(|(&a, &b)| a * b).sum();
                        let mut p_eff = row[s];
                        if !lt.keep.is_empty() {
                            let kp = lt.keep[base + s];
                            d *= kp;
                            p_eff *= kp;
                        }
                        dp[s] = d;
                        let dvs = &mut dv[s * e + col..s * e + col + hd];
                        for (o, &g) in dvs.iter_mut().zip(dyt) {
                            *o += p_eff * g;
                        }
                    }
                    let dot: T = (0..=t).map(|s| row[s] * dp[s]).sum();
                    for s in 0..=t {
                        let ds = row[s] * (dp[s] - dot) * scale;
                        for i in 0..hd {
                            dq[t * e + col + i] += ds * lt.k[s * e + col + i];
                            dk[s * e + col + i] += ds * lt.q[t * e + col + i];
                        }
                    }
                }
            }
            let mut da = vec![T::zero(); n * e];
            for (dmat, w, bias) in [(&dq, b.wq, b.bq), (&dk, b.wk, b.bk), (&dv, b.wv, b.bv)] {
                bias_grad(&mut grad[bias..bias + e], dmat);
                matmul_at_acc(&mut grad[w..w + e * e], &lt.ln1_out, dmat, n, e, e);
                matmul_bt(&mut da, dmat, self.slice(w, e * e), n, e, e, true);
            }
            {
                let (g_part, b_part) = grad.split_at_mut(b.ln1_b);
                layer_norm_backward(
                    &mut dx,
                    &mut g_part[b.ln1_g..b.ln1_g + e],
                    &mut b_part[..e],
                    &da,
                    &lt.ln1_xhat,
                    &lt.ln1_rstd,
                    self.slice(b.ln1_g, e),
                );
            }
        }

        for (t, &tok) in tape.tokens.iter().enumerate() {
            let d = &dx[t * e..(t + 1) * e];
            let te = lay.wte + tok as usize * e;
            for (g, &v) in grad[te..te + e].iter_mut().zip(d) {
                *g += v;
            }
            let pe = lay.wpe + t * e;
            for (g, &v) in grad[pe..pe + e].iter_mut().zip(d) {
                *g += v;
            }
        }
    }

    /// Per-position logits, `tokens.len() x vocab_size`, in eval mode.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        Ok(self.forward_tape(tokens, None)?.logits)
    }

    /// Summed negative log-likelihood of `tokens[1..]` given their prefixes
    /// and the number of predicted tokens.
    pub fn sequence_nll(&self, tokens: &[TokenId]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Err(Error::Bounds("need at least two tokens to score".into()));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let logits = self.forward(inputs)?;
        let v = self.config.vocab_size;
        let nll = tokens[1..]
            .iter()
            .enumerate()
            .map(|(t, &target)| -log_softmax_row(&logits[t * v..(t + 1) * v])[target as usize])
            .sum();
        Ok((nll, inputs.len()))
    }

    /// Loss over `tokens[1..]` and its gradient scaled by `scale`, added into
    /// `grad`. Returns the unscaled summed NLL.
    pub(crate) fn accumulate_grad(
        &self,
        tokens: &[TokenId],
        grad: &mut [T],
        scale: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Bounds("need at least two tokens to train on".into()));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let tape = self.forward_tape(inputs, dropout)?;
        let v = self.config.vocab_size;
        let mut dlogits = vec![T::zero(); tape.logits.len()];
        let mut nll = 0.0;
        for (t, &target) in tokens[1..].iter().enumerate() {
            let lp = log_softmax_row(&tape.logits[t * v..(t + 1) * v]);
            nll -= lp[target as usize];
            let d = &mut dlogits[t * v..(t + 1) * v];
            for (j, (dj, l)) in d.iter_mut().zip(&lp).enumerate() {
                let onehot = if j == target as usize { 1.0 } else { 0.0 };
                *dj = T::of((l.exp() - onehot) * scale);
            }
        }
        self.backward(&tape, &dlogits, grad);
        Ok(nll)
    }

    /// Natural-log probability of `pw`, including the `[EOS]` step.
    pub fn log_prob(&self, pw: &[u8]) -> Result<f64> {
        if pw.len() > self.config.max_password_len() {
            return Err(Error::Bounds(format!(
                "password of length {} exceeds the model limit of {}",
                pw.len(),
                self.config.max_password_len()
            )));
        }
        Ok(-self.sequence_nll(&encode(pw)?)?.0)
    }

    /// Next-token log-probabilities after `prefix` (which should start with
    /// `[SOS]`).
    pub fn next_token_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.forward(prefix)?;
        let v = self.config.vocab_size;
        Ok(log_softmax_row(&logits[logits.len() - v..]))
    }

    pub fn generator(&self) -> Generator<'_, T> {
        Generator {
            w: self,
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            pos: 0,
        }
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let max_len = self.config.max_password_len();
        let mut gen = self.generator();
        let mut text = Vec::new();
        let mut path_lp = 0.0;
        let mut tok = SOS;
        let status = loop {
            let lps = log_softmax_row(&gen.step(tok)?);
            let next = draw(&lps, rng);
            path_lp += lps[next as usize];
            if next == EOS {
                break SampleStatus::Complete;
            }
            match id_char(next) {
                None => break SampleStatus::Invalid,
                Some(_) if text.len() == max_len => break SampleStatus::Truncated,
                Some(c) => text.push(c),
            }
            tok = next;
        };
        Ok(Sample {
            password: text,
            log_prob: path_lp,
            status,
        })
    }

    /// `n` ancestral samples at temperature 1. Sample `i` draws from its own
    /// ChaCha stream, so results do not depend on thread scheduling.
    /// Complete samples are rescored with [`Self::log_prob`] so their
    /// log-probabilities are exactly what scoring would report.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut s = self.sample_one(&mut rng)?;
                if s.status == SampleStatus::Complete {
                    s.log_prob = self.log_prob(&s.password)?;
                }
                Ok(s)
            })
            .collect()
    }
}

/// Inverse-CDF draw from a log-probability row.
pub(crate) fn draw<R: Rng>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    last as TokenId
}

/// Incremental decoding with cached keys and values.
pub struct Generator<'a, T> {
    w: &'a DecoderWeights<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    pos: usize,
}

impl<T: Scalar> Generator<'_, T> {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<T>> {
        let w = self.w;
        let cfg = &w.config;
        let lay = &w.layout;
        if self.pos >= cfg.max_positions {
            return Err(Error::Bounds(format!(
                "generation past max_positions {}",
                cfg.max_positions
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Bounds(format!("token id {token} outside vocabulary")));
        }
        let (e, inter, heads) = (cfg.embed_dim, cfg.intermediate_dim, cfg.heads);
        let hd = cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let t = self.pos;

        let mut x: Vec<T> = w
            .slice(lay.wte + token as usize * e, e)
            .iter()
            .zip(w.slice(lay.wpe + t * e, e))
            .map(|(&a, &b)| a + b)
            .collect();
        let mut xhat = vec![T::zero(); e];
        let mut rstd = [T::zero()];
        let mut normed = vec![T::zero(); e];
        let mut q = vec![T::zero(); e];
        let mut kv = vec![T::zero(); e];
        let mut y = vec![T::zero(); e];
        let mut proj = vec![T::zero(); e];
        let mut hidden = vec![T::zero(); inter];
        let mut scores = vec![T::zero(); t + 1];

        for (l, b) in lay.blocks.iter().enumerate() {
            layer_norm(&mut normed, &mut xhat, &mut rstd, &x, w.slice(b.ln1_g, e), w.slice(b.ln1_b, e));
            matmul(&mut q, &normed, w.slice(b.wq, e * e), 1, e, e, false);
            add_bias(&mut q, w.slice(b.bq, e));
            matmul(&mut kv, &normed, w.slice(b.wk, e * e), 1, e, e, false);
            add_bias(&mut kv, w.slice(b.bk, e));
            self.keys[l].extend_from_slice(&kv);
            matmul(&mut kv, &normed, w.slice(b.wv, e * e), 1, e, e, false);
            add_bias(&mut kv, w.slice(b.bv, e));
            self.values[l].extend_from_slice(&kv);

            let (keys, values) = (&self.keys[l], &self.values[l]);
            y.fill(T::zero());
            for h in 0..heads {
                let col = h * hd;
                let qh = &q[col..col + hd];
                let mut max = T::neg_infinity();
                for s in 0..=t {
                    let ks = &keys[s * e + col..s * e + col + hd];
                    scores[s] = qh.iter().zip(ks).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    max = max.max(scores[s]);
                }
                let mut sum = T::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let inv = sum.recip();
                for s in 0..=t {
                    let p = scores[s] * inv;
                    let vs = &values[s * e + col..s * e + col + hd];
                    for (o, &vv) in y[col..col + hd].iter_mut().zip(vs) {
                        *o += p * vv;
                    }
                }
            }
            matmul(&mut proj, &y, w.slice(b.wo, e * e), 1, e, e, false);
            add_bias(&mut proj, w.slice(b.bo, e));
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            layer_norm(&mut normed, &mut xhat, &mut rstd, &x, w.slice(b.ln2_g, e), w.slice(b.ln2_b, e));
            matmul(&mut hidden, &normed, w.slice(b.w1, e * inter), 1, e, inter, false);
            add_bias(&mut hidden, w.slice(b.b1, inter));
            for hv in hidden.iter_mut() {
                *hv = gelu(*hv);
            }
            matmul(&mut proj, &hidden, w.slice(b.w2, inter * e), 1, inter, e, false);
            add_bias(&mut proj, w.slice(b.b2, e));
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
        layer_norm(&mut normed, &mut xhat, &mut rstd, &x, w.slice(lay.lnf_g, e), w.slice(lay.lnf_b, e));
        let mut logits = vec![T::zero(); cfg.vocab_size];
        matmul_bt(
            &mut logits,
            &normed,
            w.slice(lay.output_matrix(), cfg.vocab_size * e),
            1,
            e,
            cfg.vocab_size,
            false,
        );
        self.pos += 1;
        Ok(logits)
    }
}

impl<T: Scalar> PasswordModel for DecoderWeights<T> {
    fn log_prob(&self, pw: &[u8]) -> Result<f64> {
        DecoderWeights::log_prob(self, pw)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        DecoderWeights::sample(self, n, seed)
    }

    fn max_password_len(&self) -> Option<usize> {
        Some(self.config.max_password_len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::{char_id, VOCAB_SIZE};

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            embed_dim: 8,
            intermediate_dim: 16,
            heads: 2,
            vocab_size: VOCAB_SIZE,
            max_positions: 10,
            attention_dropout: 0.1,
            tie_output_embedding: true,
        }
    }

    #[test]
    fn causal_mask_pattern() {
        let m = CausalMask::new(3);
        for i in 0..3 {
            for j in 0..3 {
                if i >= j {
                    assert_eq!(m.get(i, j), 0.0);
                } else {
                    assert_eq!(m.get(i, j), f64::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn too_long_sequence_is_bounds_error() {
        let w = DecoderWeights::<f32>::init(tiny(), 1).unwrap();
        let ok = vec![SOS; 10];
        assert!(w.forward(&ok).is_ok());
        let long = vec![SOS; 11];
        assert!(matches!(w.forward(&long), Err(Error::Bounds(_))));
        assert!(matches!(w.log_prob(b"123456789"), Err(Error::Bounds(_))));
        assert!(w.log_prob(b"12345678").is_ok());
    }

    #[test]
    fn incremental_matches_full_forward() {
        let w = DecoderWeights::<f64>::init(tiny(), 3).unwrap();
        let toks = encode(b"abc12").unwrap();
        let full = w.forward(&toks).unwrap();
        let mut gen = w.generator();
        for (t, &tok) in toks.iter().enumerate() {
            let step = gen.step(tok).unwrap();
            for (a, b) in step.iter().zip(&full[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_single_layer() {
        // One layer, E=2, one head, zero FFN, identity q/k/v/o projections,
        // unit layer-norm gains. Two input tokens a, b.
        let cfg = ModelConfig {
            layers: 1,
            embed_dim: 2,
            intermediate_dim: 2,
            heads: 1,
            vocab_size: VOCAB_SIZE,
            max_positions: 4,
            attention_dropout: 0.0,
            tie_output_embedding: true,
        };
        let mut w = DecoderWeights::<f64>::zeros(cfg).unwrap();
        let (a, b) = (char_id(b'a').unwrap() as usize, char_id(b'b').unwrap() as usize);
        {
            let wte = w.tensor_mut("wte").unwrap();
            wte[a * 2..a * 2 + 2].copy_from_slice(&[1.0, -1.0]);
            wte[b * 2..b * 2 + 2].copy_from_slice(&[2.0, 1.0]);
        }
        for name in ["h.0.attn.wq", "h.0.attn.wk", "h.0.attn.wv", "h.0.attn.wo"] {
            w.tensor_mut(name).unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let logits = w.forward(&[a as u32, b as u32]).unwrap();

        // Independent evaluation.
        let ln = |v: [f64; 2]| {
            let m = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
            let r = 1.0 / (var + 1e-5).sqrt();
            [(v[0] - m) * r, (v[1] - m) * r]
        };
        let x = [[1.0, -1.0], [2.0, 1.0]];
        let r = [ln(x[0]), ln(x[1])];
        let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
        let scale = 1.0 / 2f64.sqrt();
        let attn0 = r[0];
        let s00 = dot(r[1], r[0]) * scale;
        let s01 = dot(r[1], r[1]) * scale;
        let p0 = s00.exp() / (s00.exp() + s01.exp());
        let attn1 = [p0 * r[0][0] + (1.0 - p0) * r[1][0], p0 * r[0][1] + (1.0 - p0) * r[1][1]];
        // FFN is zero: w2 = 0 and b2 = 0 so it contributes nothing.
        let h = [
            ln([x[0][0] + attn0[0], x[0][1] + attn0[1]]),
            ln([x[1][0] + attn1[0], x[1][1] + attn1[1]]),
        ];
        let wte = w.tensor("wte").unwrap();
        for t in 0..2 {
            for tok in 0..VOCAB_SIZE {
                let expected = dot(h[t], [wte[tok * 2], wte[tok * 2 + 1]]);
                assert!((logits[t * VOCAB_SIZE + tok] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_eos_yields_empty_strings() {
        let mut w = DecoderWeights::<f32>::zeros(tiny()).unwrap();
        w.tensor_mut("lnf.b").unwrap()[0] = 1.0;
        w.tensor_mut("wte").unwrap()[EOS as usize * 8] = 100.0;
        let samples = w.sample(20, 5).unwrap();
        assert_eq!(samples.len(), 20);
        assert!(samples
            .iter()
            .all(|s| s.password.is_empty() && s.status == SampleStatus::Complete));
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let w = DecoderWeights::<f32>::init(tiny(), 11).unwrap();
        let a = w.sample(30, 9).unwrap();
        let b = w.sample(30, 9).unwrap();
        assert_eq!(a, b);
        let c = w.sample(30, 10).unwrap();
        assert_ne!(a, c);
        for s in a.iter().filter(|s| s.status == SampleStatus::Complete) {
            assert_eq!(s.log_prob, w.log_prob(&s.password).unwrap());
        }
        // An untrained decoder puts weight on special tokens and overlong
        // strings, so some samples end invalid or truncated.
        assert!(a.iter().all(|s| s.password.len() <= 8));
    }

    #[test]
    fn draw_respects_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lp = vec![f64::NEG_INFINITY; 4];
        lp[2] = 0.0;
        for _ in 0..50 {
            assert_eq!(draw(&lp, &mut rng), 2);
        }
    }
}
