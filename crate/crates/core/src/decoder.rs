//! Greedy decoding, optionally constrained by a [`MaskTable`].

use rayon::prelude::*;
use thiserror::Error;

use crate::mask::{DecodeState, MaskError, MaskTable};
use crate::matrix::{argmax, Matrix, MatrixError};
use crate::vocab::{SpecialIds, TokenId, TokenSeq};

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("logits provider failed: {0}")]
pub struct ProviderError(pub String);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("provider returned {got} logits, vocabulary has {expected}")]
    LogitsLength { expected: usize, got: usize },
    #[error("provider returned a non-finite logit for token {token}")]
    NonFinite { token: usize },
    #[error("max_len must be positive")]
    ZeroMaxLen,
    #[error("batch has {tables} mask tables but {sources} sources")]
    BatchMismatch { tables: usize, sources: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Anything that scores the next token given the decoded prefix, the format
/// state and the source sentence.
pub trait LogitsProvider {
    fn logits(
        &self,
        prefix: &[TokenId],
        state: &DecodeState,
        source: &[TokenId],
    ) -> Result<Vec<f64>, ProviderError>;
}

impl<P: LogitsProvider + ?Sized> LogitsProvider for &P {
    fn logits(
        &self,
        prefix: &[TokenId],
        state: &DecodeState,
        source: &[TokenId],
    ) -> Result<Vec<f64>, ProviderError> {
        (**self).logits(prefix, state, source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyMode {
    /// Illegal logits are replaced by the smallest finite `f64`.
    #[default]
    NegInfinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub formatted: bool,
    pub penalty: PenaltyMode,
}

impl DecodeConfig {
    pub fn formatted(formatted: bool) -> Self {
        Self {
            formatted,
            ..Self::default()
        }
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            formatted: false,
            penalty: PenaltyMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Every emitted token, including a final `<EOS>`.
    pub tokens: TokenSeq,
    pub stop: StopReason,
    /// FSM state after the last token (tracked even when unconstrained).
    pub final_state: DecodeState,
}

impl DecodeOutput {
    /// True when decoding hit `max_len` in the middle of an object.
    pub fn truncated_mid_object(&self) -> bool {
        self.stop == StopReason::MaxLen && !self.final_state.at_object_boundary
    }

    /// Tokens to score: drops the trailing `<EOS>`, and on a mid-object
    /// truncation drops the incomplete tail after the last object separator.
    pub fn scored_tokens(&self, specials: &SpecialIds) -> &[TokenId] {
        let tokens: &[TokenId] = &self.tokens;
        match self.stop {
            StopReason::Eos => &tokens[..tokens.len() - 1],
            StopReason::MaxLen if self.truncated_mid_object() => {
                let keep = tokens
                    .iter()
                    .rposition(|&t| t == specials.obj_sep)
                    .map_or(0, |p| p + 1);
                &tokens[..keep]
            }
            StopReason::MaxLen => tokens,
        }
    }
}

/// Overwrites every illegal logit with the penalty value.
pub fn apply_penalty(table: &MaskTable, state: &DecodeState, logits: &mut [f64], mode: PenaltyMode) {
    let penalty = match mode {
        PenaltyMode::NegInfinity => f64::MIN,
    };
    for (id, logit) in logits.iter_mut().enumerate() {
        if !table.is_legal(state, id as TokenId) {
            *logit = penalty;
        }
    }
}

pub fn greedy_decode<P: LogitsProvider + ?Sized>(
    provider: &P,
    table: &MaskTable,
    cfg: &DecodeConfig,
    source: &[TokenId],
) -> Result<DecodeOutput, DecodeError> {
    if cfg.max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let v = table.vocab_size();
    let eos = table.specials().eos;
    let mut state = DecodeState::INITIAL;
    let mut tokens = TokenSeq::default();
    let mut stop = StopReason::MaxLen;
    while tokens.len() < cfg.max_len {
        let mut logits = provider.logits(&tokens, &state, source)?;
        if logits.len() != v {
            return Err(DecodeError::LogitsLength {
                expected: v,
                got: logits.len(),
            });
        }
        if let Some(token) = logits.iter().position(|x| !x.is_finite()) {
            return Err(DecodeError::NonFinite { token });
        }
        let token = if cfg.formatted {
            apply_penalty(table, &state, &mut logits, cfg.penalty);
            legal_argmax(table, &state, &logits)
        } else {
            argmax(&logits) as TokenId
        };
        tokens.push(token);
        state = if cfg.formatted {
            table.advance(&state, token)?
        } else {
            table.track(&state, token)
        };
        if token == eos {
            stop = StopReason::Eos;
            break;
        }
    }
    let out = DecodeOutput {
        tokens,
        stop,
        final_state: state,
    };
    if out.truncated_mid_object() {
        log::warn!(
            "decoding hit max_len {} inside an object; incomplete tail dropped before scoring",
            cfg.max_len
        );
    }
    Ok(out)
}

// Highest logit among legal tokens, lowest id on ties. Equivalent to argmax
// after the penalty, without relying on the penalty being strictly lower.
fn legal_argmax(table: &MaskTable, state: &DecodeState, logits: &[f64]) -> TokenId {
    let mut best: Option<usize> = None;
    for (id, &z) in logits.iter().enumerate() {
        if table.is_legal(state, id as TokenId) && best.is_none_or(|b| z > logits[b]) {
            best = Some(id);
        }
    }
    best.expect("every reachable state has a legal token") as TokenId
}

/// Decodes each `(table, source)` pair independently, in parallel. Output
/// order follows input order; a failed item does not affect its siblings.
pub fn batch_decode<P: LogitsProvider + Sync + ?Sized>(
    provider: &P,
    tables: &[MaskTable],
    cfg: &DecodeConfig,
    sources: &[TokenSeq],
) -> Result<Vec<Result<DecodeOutput, DecodeError>>, DecodeError> {
    if tables.len() != sources.len() {
        return Err(DecodeError::BatchMismatch {
            tables: tables.len(),
            sources: sources.len(),
        });
    }
    Ok(tables
        .par_iter()
        .zip(sources.par_iter())
        .map(|(table, source)| greedy_decode(provider, table, cfg, source))
        .collect())
}

/// Replays a fixed `T x V` logits matrix: step `t` returns row `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedProvider {
    rows: Matrix,
}

impl ScriptedProvider {
    pub fn new(rows: Matrix) -> Self {
        Self { rows }
    }

    pub fn parse_text(text: &str) -> Result<Self, MatrixError> {
        Matrix::parse_text(text).map(Self::new)
    }

    /// One-hot rows reproducing `target` under greedy decoding.
    pub fn one_hot(target: &[TokenId], vocab_size: usize) -> Self {
        let mut rows = Matrix::zeros(target.len(), vocab_size);
        for (t, &tok) in target.iter().enumerate() {
            rows.set(t, tok as usize, 1.0);
        }
        Self { rows }
    }
}

impl LogitsProvider for ScriptedProvider {
    fn logits(
        &self,
        prefix: &[TokenId],
        _state: &DecodeState,
        _source: &[TokenId],
    ) -> Result<Vec<f64>, ProviderError> {
        let t = prefix.len();
        if t >= self.rows.rows() {
            return Err(ProviderError(format!(
                "script has {} rows, step {t} requested",
                self.rows.rows()
            )));
        }
        Ok(self.rows.row(t).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{builtin_format, FormatSpec};
    use crate::vocab::Vocabulary;
    use std::collections::HashSet;

    const NONE: [&str; 0] = [];

    fn ner() -> (Vocabulary, MaskTable, TokenSeq) {
        let spec = builtin_format("NER")
            .unwrap()
            .bind_tagset(&["person", "location"])
            .unwrap();
        let vocab = Vocabulary::build(&["John lives here Mary", "instance of person location"], &NONE);
        let source = vocab.encode("John lives here");
        let table = MaskTable::compile(&spec, &vocab, &source).unwrap();
        (vocab, table, source)
    }

    #[test]
    fn one_hot_script_reproduces_gold() {
        let (vocab, table, source) = ner();
        let gold = vocab.encode("John <;> instance of <;> person </> here <;> instance of <;> location </> <EOS>");
        let p = ScriptedProvider::one_hot(&gold, vocab.len());
        for formatted in [false, true] {
            let out = greedy_decode(&p, &table, &DecodeConfig::formatted(formatted), &source).unwrap();
            assert_eq!(out.tokens, gold);
            assert_eq!(out.stop, StopReason::Eos);
            assert!(out.final_state.finished);
        }
    }

    /// Always prefers the out-of-source word "c"; closes objects when it can.
    struct Adversary {
        vocab: Vocabulary,
    }

    impl LogitsProvider for Adversary {
        fn logits(&self, prefix: &[TokenId], state: &DecodeState, _: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
            let s = self.vocab.specials();
            let mut z = vec![-5.0; self.vocab.len()];
            z[self.vocab.id("c").unwrap() as usize] = 10.0;
            z[self.vocab.id("a").unwrap() as usize] = 2.0;
            z[self.vocab.id("b").unwrap() as usize] = 1.0;
            if state.tokens_in_slot >= 1 {
                z[s.obj_sep as usize] = 12.0;
            }
            if prefix.contains(&s.obj_sep) {
                z[s.eos as usize] = 20.0;
            }
            Ok(z)
        }
    }

    #[test]
    fn formatted_decoding_keeps_source_slot_inside_source() {
        let spec = FormatSpec::parse("<SOURCE> </>").unwrap();
        let vocab = Vocabulary::build(&["a b c"], &NONE);
        assert_eq!(vocab.len(), 8);
        let source = vocab.encode("a b");
        let table = MaskTable::compile(&spec, &vocab, &source).unwrap();
        let p = Adversary { vocab: vocab.clone() };

        let constrained = greedy_decode(&p, &table, &DecodeConfig::formatted(true), &source).unwrap();
        assert_eq!(vocab.decode(&constrained.tokens).unwrap(), "a </> <EOS>");
        // brute-force check: every content token is a source token
        let src: HashSet<_> = source.iter().copied().collect();
        let s = vocab.specials();
        assert!(constrained.tokens.iter().all(|t| s.contains(*t) || src.contains(t)));

        let free = greedy_decode(&p, &table, &DecodeConfig::formatted(false), &source).unwrap();
        assert_eq!(vocab.decode(&free.tokens).unwrap(), "c </> <EOS>");
    }

    #[test]
    fn max_len_truncation_drops_tail() {
        let (vocab, table, source) = ner();
        let gold = vocab.encode("John <;> instance of <;> person </> here <;> instance of");
        let p = ScriptedProvider::one_hot(&gold, vocab.len());
        let cfg = DecodeConfig {
            max_len: gold.len(),
            ..DecodeConfig::formatted(true)
        };
        let out = greedy_decode(&p, &table, &cfg, &source).unwrap();
        assert_eq!(out.stop, StopReason::MaxLen);
        assert!(out.truncated_mid_object());
        assert_eq!(
            vocab.decode(out.scored_tokens(&vocab.specials())).unwrap(),
            "John <;> instance of <;> person </>"
        );
    }

    #[test]
    fn wrong_logit_length_is_an_error() {
        let (_, table, source) = ner();
        let p = ScriptedProvider::new(Matrix::zeros(3, 4));
        assert!(matches!(
            greedy_decode(&p, &table, &DecodeConfig::default(), &source),
            Err(DecodeError::LogitsLength { got: 4, .. })
        ));
        let cfg = DecodeConfig {
            max_len: 0,
            ..DecodeConfig::default()
        };
        assert_eq!(
            greedy_decode(&p, &table, &cfg, &source),
            Err(DecodeError::ZeroMaxLen)
        );
    }

    #[test]
    fn argmax_already_legal_means_identical_outputs() {
        let (vocab, table, source) = ner();
        let gold = vocab.encode("here <;> instance of <;> location </> <EOS>");
        let mut rows = Matrix::zeros(gold.len(), vocab.len());
        for (t, &tok) in gold.iter().enumerate() {
            for v in 0..vocab.len() {
                rows.set(t, v, (v as f64 * 0.37 + t as f64).sin());
            }
            rows.set(t, tok as usize, 3.0);
        }
        let p = ScriptedProvider::new(rows);
        let a = greedy_decode(&p, &table, &DecodeConfig::formatted(true), &source).unwrap();
        let b = greedy_decode(&p, &table, &DecodeConfig::formatted(false), &source).unwrap();
        assert_eq!(a, b);
    }

    struct FailsOn(TokenId, ScriptedProvider);

    impl LogitsProvider for FailsOn {
        fn logits(&self, prefix: &[TokenId], state: &DecodeState, source: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
            if source.contains(&self.0) {
                return Err(ProviderError("injected failure".into()));
            }
            self.1.logits(prefix, state, source)
        }
    }

    #[test]
    fn batch_preserves_order_and_isolates_failures() {
        let (vocab, _, _) = ner();
        let spec = builtin_format("NER")
            .unwrap()
            .bind_tagset(&["person", "location"])
            .unwrap();
        let sources: Vec<TokenSeq> = ["John", "Mary", "here"].iter().map(|s| vocab.encode(s)).collect();
        let tables: Vec<_> = sources
            .iter()
            .map(|s| MaskTable::compile(&spec, &vocab, s).unwrap())
            .collect();
        let uniform = ScriptedProvider::new(Matrix::zeros(8, vocab.len()));
        let cfg = DecodeConfig::formatted(true);

        let singles: Vec<_> = tables
            .iter()
            .zip(&sources)
            .map(|(t, s)| greedy_decode(&uniform, t, &cfg, s))
            .collect();
        assert_eq!(batch_decode(&uniform, &tables, &cfg, &sources).unwrap(), singles);
        assert!(batch_decode(&uniform, &[], &cfg, &[]).unwrap().is_empty());

        let failing = FailsOn(vocab.id("Mary").unwrap(), uniform);
        let results = batch_decode(&failing, &tables, &cfg, &sources).unwrap();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 2);
        assert!(matches!(results[1], Err(DecodeError::Provider(_))));

        assert!(matches!(
            batch_decode(&failing, &tables[..1], &cfg, &sources),
            Err(DecodeError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn scripted_provider_from_text() {
        let p = ScriptedProvider::parse_text("0 1\n1 0\n").unwrap();
        assert_eq!(p.logits(&[], &DecodeState::INITIAL, &[]).unwrap(), vec![0.0, 1.0]);
        assert!(p.logits(&[0, 0], &DecodeState::INITIAL, &[]).is_err());
    }
}
