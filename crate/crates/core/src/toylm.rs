//! A tiny log-linear next-token model, trainable with the format losses.
//!
//! The logit of token `v` is a sum of table lookups:
//!
//! ```text
//! z[v] = W[prev, k, v] + H[ctx, k, v] + mean_{s in bag} A[s, k, v]
//!      + copy(v) * (U[k, v] + C[k, pred(v)]) + b[v]
//! ```
//!
//! * `prev`: the previous token, `<PAD>` at the start of the sequence;
//! * `k`: the FSM feature index (slot, or `slot_count` between objects);
//! * `ctx`: the source word just before the first token of the current
//!   object, or `<PAD>` when there is none;
//! * `bag`: the distinct words of the source sentence. The bag term is
//!   averaged, not summed: summed, its rows act as a large per-sentence bias
//!   that the structure loss inflates for separators at every position;
//! * `copy(v)`: 1 when `v` occurs in the source and has not been emitted yet;
//!   `pred(v)` is the source word preceding its first occurrence.
//!
//! With `H`, `A`, `U` and `C` at zero this is the plain
//! `W[prev, k] + b` model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{encode_target, spec_for, DropReason, Example};
use crate::decoder::{LogitsProvider, ProviderError};
use crate::format::FormatSpec;
use crate::losses::{combined_breakdown, LossError, LossWeights, TargetAlignment};
use crate::mask::{DecodeState, MaskTable};
use crate::matrix::{argmax, Matrix};
use crate::vocab::{SpecialIds, TokenId, TokenSeq, Vocabulary};

pub const MAGIC: [u8; 4] = *b"SLTF";
pub const FORMAT_VERSION: u32 = 1;
const SPECIALS: SpecialIds = SpecialIds::FIXED;
const PAD: usize = SPECIALS.pad as usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a model file: {0}")]
    BadHeader(String),
    #[error("model has {model} tokens x {model_k} states, data needs {data} x {data_k}")]
    ShapeMismatch {
        model: usize,
        model_k: usize,
        data: usize,
        data_k: usize,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("example {id}: {reason}")]
    Example { id: String, reason: DropReason },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    v: usize,
    k: usize,
    params: Vec<f64>,
}

/// Parameter blocks, as offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    k: usize,
}

impl Layout {
    fn block(&self) -> usize {
        self.v * self.k * self.v
    }
    fn w(&self, prev: usize, k: usize) -> usize {
        (prev * self.k + k) * self.v
    }
    fn h(&self, ctx: usize, k: usize) -> usize {
        self.block() + self.w(ctx, k)
    }
    fn a(&self, s: usize, k: usize) -> usize {
        2 * self.block() + self.w(s, k)
    }
    fn u(&self, k: usize) -> usize {
        3 * self.block() + k * self.v
    }
    fn c(&self, k: usize) -> usize {
        3 * self.block() + (self.k + k) * self.v
    }
    fn b(&self) -> usize {
        3 * self.block() + 2 * self.k * self.v
    }
    fn len(&self) -> usize {
        self.b() + self.v
    }
}

/// Inputs of one prediction step.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Features {
    prev: usize,
    ctx: usize,
    k: usize,
    bag: Vec<usize>,
    /// `(v, pred(v))` for every copyable token.
    copy: Vec<(usize, usize)>,
}

impl ToyLm {
    /// `k` is the number of FSM feature indices: slot count plus one.
    pub fn zeros(vocab_size: usize, k: usize) -> Self {
        let layout = Layout { v: vocab_size, k };
        Self {
            v: vocab_size,
            k,
            params: vec![0.0; layout.len()],
        }
    }

    /// Parameters drawn from `N(0, scale^2)`.
    pub fn random(vocab_size: usize, k: usize, scale: f64, seed: u64) -> Self {
        let mut m = Self::zeros(vocab_size, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        m.params.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        m
    }

    /// Sized for `vocab` and a format with `slot_count` slots.
    pub fn for_format(vocab: &Vocabulary, slot_count: usize, scale: f64, seed: u64) -> Self {
        if scale == 0.0 {
            Self::zeros(vocab.len(), slot_count + 1)
        } else {
            Self::random(vocab.len(), slot_count + 1, scale, seed)
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn state_count(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        Layout { v: self.v, k: self.k }
    }

    /// The `W[prev, k]` row.
    pub fn w_row_mut(&mut self, prev: TokenId, k: usize) -> &mut [f64] {
        let at = self.layout().w(prev as usize, k);
        &mut self.params[at..at + self.v]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let at = self.layout().b();
        &mut self.params[at..]
    }

    fn features(&self, prefix: &[TokenId], state: &DecodeState, source: &[TokenId]) -> Features {
        let in_range = |t: TokenId| (t as usize) < self.v;
        let prev = prefix.last().map_or(PAD, |&t| t as usize);
        let k = state.feature_index(self.k - 1).min(self.k - 1);
        let mut ctx = PAD;
        if !state.at_object_boundary {
            let start = prefix.iter().rposition(|&t| t == SPECIALS.obj_sep).map_or(0, |p| p + 1);
            if let Some(&first) = prefix.get(start) {
                if let Some(i) = source.iter().position(|&s| s == first) {
                    if i > 0 && in_range(source[i - 1]) {
                        ctx = source[i - 1] as usize;
                    }
                }
            }
        }
        let mut bag: Vec<usize> = source.iter().filter(|&&s| in_range(s)).map(|&s| s as usize).collect();
        bag.sort_unstable();
        bag.dedup();
        let mut copy = Vec::new();
        for (i, &s) in source.iter().enumerate() {
            let s_us = s as usize;
            if SPECIALS.contains(s) || !in_range(s) || prefix.contains(&s) || copy.iter().any(|&(v, _)| v == s_us) {
                continue;
            }
            let pred = if i == 0 || !in_range(source[i - 1]) {
                PAD
            } else {
                source[i - 1] as usize
            };
            copy.push((s_us, pred));
        }
        Features { prev, ctx, k, bag, copy }
    }

    fn logits_of(&self, f: &Features) -> Vec<f64> {
        let l = self.layout();
        let p = &self.params;
        let v = self.v;
        let mut z: Vec<f64> = p[l.b()..l.b() + v].to_vec();
        let add = |z: &mut [f64], at: usize| z.iter_mut().zip(&p[at..at + v]).for_each(|(a, b)| *a += b);
        add(&mut z, l.w(f.prev, f.k));
        add(&mut z, l.h(f.ctx, f.k));
        let bw = 1.0 / f.bag.len().max(1) as f64;
        for &s in &f.bag {
            let at = l.a(s, f.k);
            z.iter_mut().zip(&p[at..at + v]).for_each(|(a, b)| *a += bw * b);
        }
        for &(tok, pred) in &f.copy {
            z[tok] += p[l.u(f.k) + tok] + p[l.c(f.k) + pred];
        }
        z
    }

    // `grad += scale * dz/dparams^T dl_dz`
    fn backprop(&self, f: &Features, dz: &[f64], scale: f64, grad: &mut [f64]) {
        let l = self.layout();
        let v = self.v;
        let add = |grad: &mut [f64], at: usize| {
            grad[at..at + v].iter_mut().zip(dz).for_each(|(g, d)| *g += scale * d)
        };
        add(grad, l.b());
        add(grad, l.w(f.prev, f.k));
        add(grad, l.h(f.ctx, f.k));
        let bw = scale / f.bag.len().max(1) as f64;
        for &s in &f.bag {
            let at = l.a(s, f.k);
            grad[at..at + v].iter_mut().zip(dz).for_each(|(g, d)| *g += bw * d);
        }
        for &(tok, pred) in &f.copy {
            grad[l.u(f.k) + tok] += scale * dz[tok];
            grad[l.c(f.k) + pred] += scale * dz[tok];
        }
    }

    /// Teacher-forced features and logits for every target position.
    fn unroll(&self, ex: &PreparedExample) -> (Vec<Features>, Matrix) {
        let target = ex.align.target();
        let mut feats = Vec::with_capacity(target.len());
        let mut logits = Matrix::zeros(target.len(), self.v);
        for t in 0..target.len() {
            let f = self.features(&target[..t], &ex.align.states()[t], &ex.source);
            logits.row_mut(t).copy_from_slice(&self.logits_of(&f));
            feats.push(f);
        }
        (feats, logits)
    }

    fn check_shape(&self, data: &[PreparedExample]) -> Result<(), ModelError> {
        if let Some(ex) = data
            .iter()
            .find(|ex| ex.table.vocab_size() != self.v || ex.table.slot_count() + 1 != self.k)
        {
            return Err(ModelError::ShapeMismatch {
                model: self.v,
                model_k: self.k,
                data: ex.table.vocab_size(),
                data_k: ex.table.slot_count() + 1,
            });
        }
        Ok(())
    }

    /// Mean combined loss over `data` and its gradient with respect to the
    /// flat parameter vector.
    pub fn loss_and_grad(&self, data: &[PreparedExample], w: &LossWeights) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_shape(data)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let n = data.len().max(1) as f64;
        for ex in data {
            let (feats, logits) = self.unroll(ex);
            let b = combined_breakdown(&logits, &ex.align, &ex.table, w)?;
            total += b.total.value;
            for (t, f) in feats.iter().enumerate() {
                self.backprop(f, b.total.grad.row(t), 1.0 / n, &mut grad);
            }
        }
        Ok((total / n, grad))
    }

    /// Mean loss components and teacher-forced accuracy over `data`.
    pub fn evaluate(&self, data: &[PreparedExample], w: &LossWeights) -> Result<EpochMetrics, ModelError> {
        self.check_shape(data)?;
        let mut m = EpochMetrics::default();
        let mut hits = 0usize;
        let mut positions = 0usize;
        for ex in data {
            let (_, logits) = self.unroll(ex);
            let b = combined_breakdown(&logits, &ex.align, &ex.table, w)?;
            m.ce += b.ce;
            m.st += b.st;
            m.sl += b.sl;
            m.combined += b.total.value;
            for (t, &gold) in ex.align.target().iter().enumerate() {
                hits += usize::from(argmax(logits.row(t)) == gold as usize);
            }
            positions += ex.align.len();
        }
        let n = data.len().max(1) as f64;
        m.ce /= n;
        m.st /= n;
        m.sl /= n;
        m.combined /= n;
        m.accuracy = if positions == 0 { 0.0 } else { hits as f64 / positions as f64 };
        Ok(m)
    }

    /// Minibatch SGD on the combined loss. Returns the metrics before
    /// training (epoch 0) and after every epoch.
    pub fn train(&mut self, data: &[PreparedExample], cfg: &TrainConfig) -> Result<Vec<EpochMetrics>, ModelError> {
        self.check_shape(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = vec![self.evaluate(data, &cfg.weights)?];
        let batch = cfg.batch_size.max(1);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                // Gradients are taken at the pre-step parameters, then applied.
                let mut steps = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (feats, logits) = self.unroll(&data[i]);
                    let b = combined_breakdown(&logits, &data[i].align, &data[i].table, &cfg.weights)?;
                    steps.push((feats, b.total.grad));
                }
                let scale = -cfg.lr / chunk.len() as f64;
                let mut params = std::mem::take(&mut self.params);
                for (feats, grad) in &steps {
                    for (t, f) in feats.iter().enumerate() {
                        self.backprop(f, grad.row(t), scale, &mut params);
                    }
                }
                self.params = params;
            }
            let mut m = self.evaluate(data, &cfg.weights)?;
            m.epoch = epoch;
            log::debug!("epoch {epoch}: combined {:.4} ce {:.4} acc {:.3}", m.combined, m.ce, m.accuracy);
            history.push(m);
        }
        Ok(history)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&MAGIC)?;
        out.write_all(&(self.v as u32).to_le_bytes())?;
        out.write_all(&(self.k as u32).to_le_bytes())?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, ModelError> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if header[..4] != MAGIC {
            return Err(ModelError::BadHeader("wrong magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (v, k, version) = (word(4), word(8), word(12) as u32);
        if version != FORMAT_VERSION {
            return Err(ModelError::BadHeader(format!("unsupported version {version}")));
        }
        if v == 0 || k == 0 {
            return Err(ModelError::BadHeader(format!("empty shape {v} x {k}")));
        }
        let mut body = Vec::new();
        input.read_to_end(&mut body)?;
        let expected = Layout { v, k }.len();
        if body.len() != expected * 8 {
            return Err(ModelError::BadHeader(format!(
                "expected {expected} parameters, found {} bytes",
                body.len()
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::BadHeader("non-finite parameter".into()));
        }
        Ok(Self { v, k, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(self.write_to(BufWriter::new(File::create(path)?))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl LogitsProvider for ToyLm {
    fn logits(
        &self,
        prefix: &[TokenId],
        state: &DecodeState,
        source: &[TokenId],
    ) -> Result<Vec<f64>, ProviderError> {
        if let Some(t) = prefix.iter().find(|&&t| t as usize >= self.v) {
            return Err(ProviderError(format!("token {t} outside the model vocabulary")));
        }
        Ok(self.logits_of(&self.features(prefix, state, source)))
    }
}

/// An example encoded and aligned against its format, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub id: String,
    pub source: TokenSeq,
    pub table: MaskTable,
    pub align: TargetAlignment,
}

impl PreparedExample {
    pub fn new(ex: &Example, template: &FormatSpec, vocab: &Vocabulary) -> Result<Self, ModelError> {
        let fail = |reason: DropReason| ModelError::Example {
            id: ex.id.clone(),
            reason,
        };
        let spec = spec_for(template, ex).map_err(|e| fail(e.into()))?;
        let source = vocab.encode(&ex.input);
        let table = MaskTable::compile(&spec, vocab, &source).map_err(|e| fail(DropReason::Align(e.into())))?;
        let target = encode_target(vocab, &ex.target);
        let align = TargetAlignment::new(&table, &target).map_err(|e| fail(DropReason::Align(e.into())))?;
        Ok(Self {
            id: ex.id.clone(),
            source,
            table,
            align,
        })
    }
}

pub fn prepare(examples: &[Example], template: &FormatSpec, vocab: &Vocabulary) -> Result<Vec<PreparedExample>, ModelError> {
    examples.iter().map(|ex| PreparedExample::new(ex, template, vocab)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.5,
            batch_size: 1,
            weights: LossWeights::DEFAULT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub st: f64,
    pub sl: f64,
    pub combined: f64,
    /// Fraction of target positions whose argmax is the gold token.
    pub accuracy: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,ce,st,sl,combined,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.ce, self.st, self.sl, self.combined, self.accuracy
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, gen_synthetic, synthetic_format, SyntheticConfig, TaskShape};
    use crate::decoder::{greedy_decode, DecodeConfig};

    fn ner(n: usize, seed: u64) -> (Vocabulary, FormatSpec, Vec<PreparedExample>) {
        let examples = gen_synthetic(&SyntheticConfig::new(TaskShape::NerLike, n, seed)).unwrap();
        let vocab = build_vocab(&examples);
        let spec = synthetic_format(TaskShape::NerLike);
        let data = prepare(&examples, &spec, &vocab).unwrap();
        (vocab, spec, data)
    }

    #[test]
    fn zero_model_is_uniform() {
        let (vocab, _, data) = ner(5, 0);
        let m = ToyLm::zeros(vocab.len(), 4);
        let metrics = m.evaluate(&data, &LossWeights::cross_entropy_only()).unwrap();
        assert!((metrics.ce - (vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_reads_w_row_plus_bias() {
        let mut m = ToyLm::zeros(6, 2);
        m.w_row_mut(3, 1).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        m.bias_mut().copy_from_slice(&[0.5; 6]);
        let state = DecodeState {
            slot_index: 1,
            tokens_in_slot: 0,
            at_object_boundary: false,
            finished: false,
        };
        let z = m.logits(&[5, 3], &state, &[]).unwrap();
        assert_eq!(z, vec![1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
        assert_eq!(z, m.logits(&[5, 3], &state, &[]).unwrap());
        assert!(m.logits(&[9], &state, &[]).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (vocab, _, data) = ner(10, 1);
        let mut m = ToyLm::random(vocab.len(), 4, 0.1, 3);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        m.train(&data, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn cross_entropy_training_beats_uniform() {
        let (vocab, _, data) = ner(50, 2);
        let mut m = ToyLm::zeros(vocab.len(), 4);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.5,
            weights: LossWeights::cross_entropy_only(),
            ..TrainConfig::default()
        };
        let history = m.train(&data, &cfg).unwrap();
        assert_eq!(history.len(), 201);
        assert!(history[200].ce < (vocab.len() as f64).ln());
        assert!(history[200].ce < history[0].ce);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (vocab, _, data) = ner(4, 3);
        let m = ToyLm::random(vocab.len(), 4, 0.3, 5);
        let w = LossWeights::DEFAULT;
        let (_, grad) = m.loss_and_grad(&data, &w).unwrap();
        // Check the largest gradient entries plus a spread of others.
        let mut idx: Vec<usize> = (0..grad.len()).collect();
        idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        let picks: Vec<usize> = idx[..40].iter().copied().chain((0..grad.len()).step_by(997)).collect();
        let eps = 1e-5;
        for i in picks {
            let mut plus = m.clone();
            plus.params[i] += eps;
            let mut minus = m.clone();
            minus.params[i] -= eps;
            let fd = (plus.loss_and_grad(&data, &w).unwrap().0 - minus.loss_and_grad(&data, &w).unwrap().0) / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let m = ToyLm::random(7, 3, 1.0, 9);
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SLTF");
        assert_eq!(bytes.len(), 16 + 8 * m.params().len());
        assert_eq!(ToyLm::read_from(bytes.as_slice()).unwrap(), m);
        bytes[0] = b'X';
        assert!(matches!(ToyLm::read_from(bytes.as_slice()), Err(ModelError::BadHeader(_))));
        assert!(ToyLm::read_from(&b"SLTF"[..]).is_err());
    }

    #[test]
    fn memorizes_a_single_example() {
        let (vocab, spec, data) = ner(30, 4);
        let one = vec![data.iter().find(|d| d.align.len() > 10).unwrap().clone()];
        let mut m = ToyLm::zeros(vocab.len(), spec.slot_count() + 1);
        let cfg = TrainConfig {
            epochs: 100,
            lr: 1.0,
            weights: LossWeights::cross_entropy_only(),
            ..TrainConfig::default()
        };
        m.train(&one, &cfg).unwrap();
        let out = greedy_decode(&m, &one[0].table, &DecodeConfig::formatted(false), &one[0].source).unwrap();
        assert_eq!(out.tokens, *one[0].align.target());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (vocab, _, data) = ner(3, 0);
        let m = ToyLm::zeros(vocab.len() + 1, 4);
        assert!(matches!(m.evaluate(&data, &LossWeights::DEFAULT), Err(ModelError::ShapeMismatch { .. })));
    }
}
