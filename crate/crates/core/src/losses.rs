//! Training losses over per-position logits.
//!
//! All losses take a `T x V` logits matrix and a [`TargetAlignment`] of the
//! gold sequence against the format FSM, and return the loss value together
//! with its closed-form gradient with respect to the logits.
//!
//! * cross-entropy: mean over all positions of `-log softmax(z_t)[y_t]`.
//! * structure loss: `missed * w_miss * sum_{t in S} nll_t`, where `S` holds
//!   the separator and `<EOS>` positions and `missed` counts the positions of
//!   `S` whose argmax is not the gold token. `missed` is a constant for the
//!   gradient.
//! * slot loss: mean over the remaining content positions of the negative log
//!   of the gold probability under a softmax restricted to the tokens legal in
//!   that position's FSM state.

use thiserror::Error;

use crate::format::{FormatSpec, SlotKind};
use crate::mask::{DecodeState, MaskError, MaskTable, StateMask};
use crate::matrix::{argmax, Matrix};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// Per-position logits, `T` rows by `V` columns.
pub type LogitsSequence = Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("logits have {rows} rows but the target has {target_len} positions")]
    RowMismatch { rows: usize, target_len: usize },
    #[error("target token {token} at position {position} outside {cols} logit columns")]
    TokenOutOfRange {
        position: usize,
        token: TokenId,
        cols: usize,
    },
    #[error("mask width {mask} does not match {cols} logit columns")]
    MaskWidth { mask: usize, cols: usize },
    #[error("gold token {token} at content position {position} is not legal")]
    IllegalGold { position: usize, token: TokenId },
}

/// Coefficients of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub st: f64,
    pub sl: f64,
    pub miss: f64,
}

impl LossWeights {
    pub const DEFAULT: LossWeights = LossWeights {
        ce: 0.5,
        st: 0.2,
        sl: 0.3,
        miss: 0.33,
    };

    /// Plain cross-entropy training.
    pub fn cross_entropy_only() -> Self {
        Self {
            ce: 1.0,
            st: 0.0,
            sl: 0.0,
            ..Self::DEFAULT
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    EmptyTarget,
    /// Content token of a source slot that is not in the source sentence.
    SourceMismatch,
    /// Content token of a choice slot outside its alternatives.
    TagsetMismatch,
    /// `<PAD>`/`<UNK>` or similar in an `<ANY>` slot.
    IllegalContent,
    /// A separator with no content before it.
    EmptySlot,
    /// Wrong number of slots in an object, or `<EOS>` inside an object.
    LengthMismatch,
    MissingEos,
    TokensAfterEos,
}

/// First position at which a gold target breaks its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("target violates format at position {position}: {kind:?}")]
pub struct AlignmentViolation {
    pub position: usize,
    pub kind: ViolationKind,
    pub token: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Violation(#[from] AlignmentViolation),
}

/// A gold sequence replayed through the format FSM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAlignment {
    target: TokenSeq,
    separators: Vec<usize>,
    is_separator: Vec<bool>,
    states: Vec<DecodeState>,
}

impl TargetAlignment {
    /// Replays `target` from the initial state. Fails at the first token that
    /// is illegal, or if the target does not end with `<EOS>`.
    pub fn new(table: &MaskTable, target: &[TokenId]) -> Result<Self, AlignmentViolation> {
        if target.is_empty() {
            return Err(AlignmentViolation {
                position: 0,
                kind: ViolationKind::EmptyTarget,
                token: None,
            });
        }
        let s = table.specials();
        let mut state = DecodeState::INITIAL;
        let mut states = Vec::with_capacity(target.len());
        let mut separators = Vec::new();
        for (position, &token) in target.iter().enumerate() {
            if state.finished {
                return Err(AlignmentViolation {
                    position,
                    kind: ViolationKind::TokensAfterEos,
                    token: Some(token),
                });
            }
            if !table.is_legal(&state, token) {
                let kind = if token == s.eos {
                    ViolationKind::LengthMismatch
                } else if s.is_separator(token) {
                    if state.tokens_in_slot == 0 {
                        ViolationKind::EmptySlot
                    } else {
                        ViolationKind::LengthMismatch
                    }
                } else {
                    match table.slot_kind(state.slot_index) {
                        SlotKind::Source => ViolationKind::SourceMismatch,
                        SlotKind::Choice => ViolationKind::TagsetMismatch,
                        SlotKind::Any => ViolationKind::IllegalContent,
                    }
                };
                return Err(AlignmentViolation {
                    position,
                    kind,
                    token: Some(token),
                });
            }
            states.push(state);
            if token == s.eos || s.is_separator(token) {
                separators.push(position);
            }
            state = table.track(&state, token);
        }
        if !state.finished {
            return Err(AlignmentViolation {
                position: target.len(),
                kind: ViolationKind::MissingEos,
                token: None,
            });
        }
        Ok(Self::assemble(target.to_vec().into(), separators, states))
    }

    /// Unchecked construction from externally computed parts. `states` must
    /// have one entry per target position.
    pub fn from_parts(target: TokenSeq, separators: Vec<usize>, states: Vec<DecodeState>) -> Self {
        assert_eq!(target.len(), states.len(), "one state per target position");
        let mut separators = separators;
        separators.sort_unstable();
        separators.dedup();
        assert!(separators.iter().all(|&p| p < target.len()));
        Self::assemble(target, separators, states)
    }

    fn assemble(target: TokenSeq, separators: Vec<usize>, states: Vec<DecodeState>) -> Self {
        let mut is_separator = vec![false; target.len()];
        for &p in &separators {
            is_separator[p] = true;
        }
        Self {
            target,
            separators,
            is_separator,
            states,
        }
    }

    pub fn target(&self) -> &TokenSeq {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Sorted separator positions (`S`).
    pub fn separator_positions(&self) -> &[usize] {
        &self.separators
    }

    pub fn is_separator(&self, position: usize) -> bool {
        self.is_separator[position]
    }

    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&t| !self.is_separator[t])
    }

    /// FSM state before emitting each position.
    pub fn states(&self) -> &[DecodeState] {
        &self.states
    }
}

/// Compiles the format for `source` and aligns `target` against it.
pub fn align_target(
    spec: &FormatSpec,
    vocab: &Vocabulary,
    target: &[TokenId],
    source: &[TokenId],
) -> Result<TargetAlignment, AlignError> {
    let table = MaskTable::compile(spec, vocab, source)?;
    Ok(TargetAlignment::new(&table, target)?)
}

fn check_shape(logits: &LogitsSequence, align: &TargetAlignment) -> Result<(), LossError> {
    if logits.rows() != align.len() {
        return Err(LossError::RowMismatch {
            rows: logits.rows(),
            target_len: align.len(),
        });
    }
    for (position, &token) in align.target().iter().enumerate() {
        if token as usize >= logits.cols() {
            return Err(LossError::TokenOutOfRange {
                position,
                token,
                cols: logits.cols(),
            });
        }
    }
    Ok(())
}

/// Writes `softmax(row)` into `out` and returns `log-sum-exp(row)`.
fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

/// Per-position `-log softmax(row)[gold]`, writing `softmax - onehot` into `grad_row`.
fn nll_with_grad(row: &[f64], gold: usize, grad_row: &mut [f64]) -> f64 {
    let lse = softmax_into(row, grad_row);
    grad_row[gold] -= 1.0;
    lse - row[gold]
}

pub fn cross_entropy(logits: &LogitsSequence, align: &TargetAlignment) -> Result<LossResult, LossError> {
    check_shape(logits, align)?;
    let t_len = align.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut value = 0.0;
    for (t, &gold) in align.target().iter().enumerate() {
        let g = grad.row_mut(t);
        value += nll_with_grad(logits.row(t), gold as usize, g);
        g.iter_mut().for_each(|x| *x /= t_len);
    }
    Ok(LossResult {
        value: value / t_len,
        grad,
    })
}

/// Number of separator positions whose argmax is not the gold token.
pub fn missed_separators(logits: &LogitsSequence, align: &TargetAlignment) -> usize {
    align
        .separator_positions()
        .iter()
        .filter(|&&t| argmax(logits.row(t)) != align.target()[t] as usize)
        .count()
}

pub fn structure_loss(
    logits: &LogitsSequence,
    align: &TargetAlignment,
    w_miss: f64,
) -> Result<LossResult, LossError> {
    check_shape(logits, align)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let missed = missed_separators(logits, align);
    if missed == 0 {
        return Ok(LossResult { value: 0.0, grad });
    }
    let scale = missed as f64 * w_miss;
    let mut nll_sum = 0.0;
    for &t in align.separator_positions() {
        let g = grad.row_mut(t);
        nll_sum += nll_with_grad(logits.row(t), align.target()[t] as usize, g);
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(LossResult {
        value: nll_sum * scale,
        grad,
    })
}

/// Slot loss with the legal set of each content position taken from `legal`.
pub fn slot_loss_with<F>(
    logits: &LogitsSequence,
    align: &TargetAlignment,
    mut legal: F,
) -> Result<LossResult, LossError>
where
    F: FnMut(usize, &DecodeState) -> StateMask,
{
    check_shape(logits, align)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let content: Vec<usize> = align.content_positions().collect();
    if content.is_empty() {
        return Ok(LossResult { value: 0.0, grad });
    }
    let n = content.len() as f64;
    let mut value = 0.0;
    for &t in &content {
        let mask = legal(t, &align.states()[t]);
        if mask.len() != logits.cols() {
            return Err(LossError::MaskWidth {
                mask: mask.len(),
                cols: logits.cols(),
            });
        }
        let gold = align.target()[t];
        if !mask.is_allowed(gold) {
            return Err(LossError::IllegalGold { position: t, token: gold });
        }
        let row = logits.row(t);
        let max = mask
            .allowed_ids()
            .map(|v| row[v as usize])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = mask.allowed_ids().map(|v| (row[v as usize] - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - row[gold as usize];
        let g = grad.row_mut(t);
        for v in mask.allowed_ids() {
            g[v as usize] = (row[v as usize] - lse).exp() / n;
        }
        g[gold as usize] -= 1.0 / n;
    }
    Ok(LossResult {
        value: value / n,
        grad,
    })
}

pub fn slot_loss(
    logits: &LogitsSequence,
    align: &TargetAlignment,
    table: &MaskTable,
) -> Result<LossResult, LossError> {
    slot_loss_with(logits, align, |_, state| {
        table.legal_tokens(state).unwrap_or_else(|_| StateMask::none(table.vocab_size()))
    })
}

/// `w.ce * CE + w.st * ST(w.miss) + w.sl * SL`, skipping zero-weight terms.
pub fn combined_loss(
    logits: &LogitsSequence,
    align: &TargetAlignment,
    table: &MaskTable,
    w: &LossWeights,
) -> Result<LossResult, LossError> {
    Ok(combined_breakdown(logits, align, table, w)?.total)
}

/// The combined loss together with its unweighted components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: LossResult,
    pub ce: f64,
    pub st: f64,
    pub sl: f64,
}

pub fn combined_breakdown(
    logits: &LogitsSequence,
    align: &TargetAlignment,
    table: &MaskTable,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    check_shape(logits, align)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let ce = cross_entropy(logits, align)?;
    grad.add_scaled(&ce.grad, w.ce);
    let st = structure_loss(logits, align, w.miss)?;
    grad.add_scaled(&st.grad, w.st);
    let sl = slot_loss(logits, align, table)?;
    grad.add_scaled(&sl.grad, w.sl);
    Ok(LossBreakdown {
        total: LossResult {
            value: w.ce * ce.value + w.st * st.value + w.sl * sl.value,
            grad,
        },
        ce: ce.value,
        st: st.value,
        sl: sl.value,
    })
}
