//! Format masks and the decoding state machine.
//!
//! [`compile_masks`] turns a bound [`FormatSpec`] and a source sentence into a
//! [`MaskTable`]: one boolean vector over the vocabulary per slot, marking the
//! content tokens that slot may emit. Separators and `<EOS>` are not part of
//! the per-slot masks; [`MaskTable::legal_tokens`] adds them according to the
//! current [`DecodeState`]:
//!
//! * the slot separator after at least one content token in a non-final slot,
//! * the object separator after at least one content token in the final slot,
//! * `<EOS>` only between objects.

use std::fmt;

use thiserror::Error;

use crate::format::{FormatSpec, SlotKind, SlotSpec};
use crate::vocab::{SpecialIds, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("slot {slot} has an unbound tagset")]
    UnboundTagset { slot: usize },
    #[error("choice slot {slot} has no alternative token in the vocabulary")]
    EmptyChoice { slot: usize },
    #[error("format separators {spec:?} do not match vocabulary separators {vocab:?}")]
    SeparatorMismatch {
        spec: (String, String),
        vocab: (String, String),
    },
    #[error("decoding already finished")]
    Finished,
    #[error("token {token} is illegal in state {state}")]
    IllegalToken { token: TokenId, state: DecodeState },
}

/// Boolean vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateMask {
    allowed: Vec<bool>,
}

impl StateMask {
    pub fn none(vocab_size: usize) -> Self {
        Self {
            allowed: vec![false; vocab_size],
        }
    }

    pub fn all(vocab_size: usize) -> Self {
        Self {
            allowed: vec![true; vocab_size],
        }
    }

    pub fn from_bools(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }

    pub fn allow(&mut self, id: TokenId) {
        if let Some(slot) = self.allowed.get_mut(id as usize) {
            *slot = true;
        }
    }

    pub fn block(&mut self, id: TokenId) {
        if let Some(slot) = self.allowed.get_mut(id as usize) {
            *slot = false;
        }
    }

    pub fn is_allowed(&self, id: TokenId) -> bool {
        self.allowed.get(id as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn allowed_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i as TokenId)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// `1`/`0` per token id.
    pub fn to_bits(&self) -> String {
        self.allowed.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }
}

/// Position of the decoder inside the output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecodeState {
    pub slot_index: usize,
    pub tokens_in_slot: usize,
    pub at_object_boundary: bool,
    pub finished: bool,
}

impl DecodeState {
    pub const INITIAL: DecodeState = DecodeState {
        slot_index: 0,
        tokens_in_slot: 0,
        at_object_boundary: true,
        finished: false,
    };

    /// Index into a `slot_count + 1` sized feature axis: the slot index, or
    /// `slot_count` between objects.
    pub fn feature_index(&self, slot_count: usize) -> usize {
        if self.at_object_boundary {
            slot_count
        } else {
            self.slot_index
        }
    }
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::INITIAL
    }
}

impl fmt::Display for DecodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.finished {
            f.write_str("finished")
        } else if self.at_object_boundary {
            f.write_str("boundary")
        } else {
            write!(f, "slot {} ({} tokens)", self.slot_index, self.tokens_in_slot)
        }
    }
}

/// Per-slot content masks for one (format, source sentence) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTable {
    vocab_size: usize,
    content: Vec<StateMask>,
    kinds: Vec<SlotKind>,
    specials: SpecialIds,
    objects_possible: bool,
}

pub fn compile_masks(
    spec: &FormatSpec,
    vocab: &Vocabulary,
    source: &[TokenId],
) -> Result<MaskTable, MaskError> {
    MaskTable::compile(spec, vocab, source)
}

impl MaskTable {
    pub fn compile(
        spec: &FormatSpec,
        vocab: &Vocabulary,
        source: &[TokenId],
    ) -> Result<Self, MaskError> {
        if spec.slot_sep() != vocab.slot_sep_literal() || spec.obj_sep() != vocab.obj_sep_literal() {
            return Err(MaskError::SeparatorMismatch {
                spec: (spec.slot_sep().into(), spec.obj_sep().into()),
                vocab: (vocab.slot_sep_literal().into(), vocab.obj_sep_literal().into()),
            });
        }
        if let Some(slot) = spec.slots().iter().position(SlotSpec::is_unbound) {
            return Err(MaskError::UnboundTagset { slot });
        }
        let v = vocab.len();
        let specials = vocab.specials();
        let mut content = Vec::with_capacity(spec.slot_count());
        for (slot, slot_spec) in spec.slots().iter().enumerate() {
            let mut mask = StateMask::none(v);
            match slot_spec {
                SlotSpec::UnboundTagset => return Err(MaskError::UnboundTagset { slot }),
                SlotSpec::Any => vocab.content_ids().for_each(|id| mask.allow(id)),
                SlotSpec::Source => source
                    .iter()
                    .filter(|&&id| (id as usize) < v && !specials.contains(id))
                    .for_each(|&id| mask.allow(id)),
                SlotSpec::Choice(choices) => {
                    for word in choices.iter().flat_map(|c| c.split(' ')) {
                        match vocab.id(word) {
                            Some(id) if !specials.contains(id) => mask.allow(id),
                            _ => log::debug!("choice word {word:?} of slot {slot} not in vocabulary"),
                        }
                    }
                    if mask.count() == 0 {
                        return Err(MaskError::EmptyChoice { slot });
                    }
                }
            }
            content.push(mask);
        }
        let objects_possible = content.iter().all(|m| m.count() > 0);
        Ok(Self {
            vocab_size: v,
            kinds: spec.slots().iter().map(SlotSpec::kind).collect(),
            content,
            specials,
            objects_possible,
        })
    }

    /// Builds a table directly from per-slot content masks.
    pub fn from_parts(kinds: Vec<SlotKind>, content: Vec<StateMask>, specials: SpecialIds) -> Self {
        assert_eq!(kinds.len(), content.len(), "one mask per slot");
        assert!(!content.is_empty(), "at least one slot");
        let vocab_size = content[0].len();
        assert!(content.iter().all(|m| m.len() == vocab_size));
        let objects_possible = content.iter().all(|m| m.count() > 0);
        Self {
            vocab_size,
            content,
            kinds,
            specials,
            objects_possible,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn slot_count(&self) -> usize {
        self.content.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn slot_kind(&self, slot: usize) -> SlotKind {
        self.kinds[slot]
    }

    pub fn content_mask(&self, slot: usize) -> &StateMask {
        &self.content[slot]
    }

    /// False when some slot has no legal content (e.g. a source sentence of
    /// unknown words); then only `<EOS>` is legal at the start.
    pub fn objects_possible(&self) -> bool {
        self.objects_possible
    }

    pub fn is_legal(&self, state: &DecodeState, token: TokenId) -> bool {
        if state.finished || token as usize >= self.vocab_size {
            return false;
        }
        let s = &self.specials;
        let last = self.slot_count() - 1;
        if token == s.eos {
            state.at_object_boundary
        } else if token == s.slot_sep {
            state.tokens_in_slot >= 1 && state.slot_index < last
        } else if token == s.obj_sep {
            state.tokens_in_slot >= 1 && state.slot_index == last
        } else if state.at_object_boundary && !self.objects_possible {
            false
        } else {
            self.content[state.slot_index].is_allowed(token)
        }
    }

    pub fn legal_tokens(&self, state: &DecodeState) -> Result<StateMask, MaskError> {
        if state.finished {
            return Err(MaskError::Finished);
        }
        let mut mask = if state.at_object_boundary && !self.objects_possible {
            StateMask::none(self.vocab_size)
        } else {
            self.content[state.slot_index].clone()
        };
        for id in [self.specials.eos, self.specials.slot_sep, self.specials.obj_sep] {
            if self.is_legal(state, id) {
                mask.allow(id);
            }
        }
        Ok(mask)
    }

    pub fn advance(&self, state: &DecodeState, token: TokenId) -> Result<DecodeState, MaskError> {
        if state.finished {
            return Err(MaskError::Finished);
        }
        if !self.is_legal(state, token) {
            return Err(MaskError::IllegalToken {
                token,
                state: *state,
            });
        }
        Ok(self.track(state, token))
    }

    /// Structural transition without legality checks, used to follow
    /// unconstrained output. A slot separator in the final slot stays there.
    pub fn track(&self, state: &DecodeState, token: TokenId) -> DecodeState {
        if state.finished {
            return *state;
        }
        let s = &self.specials;
        if token == s.eos {
            DecodeState {
                finished: true,
                ..*state
            }
        } else if token == s.slot_sep {
            DecodeState {
                slot_index: (state.slot_index + 1).min(self.slot_count() - 1),
                tokens_in_slot: 0,
                at_object_boundary: false,
                finished: false,
            }
        } else if token == s.obj_sep {
            DecodeState::INITIAL
        } else {
            DecodeState {
                slot_index: state.slot_index,
                tokens_in_slot: state.tokens_in_slot + 1,
                at_object_boundary: false,
                finished: false,
            }
        }
    }

    /// The distinct decoding situations, in dump order: the object boundary,
    /// then for each slot its empty and non-empty states.
    pub fn representative_states(&self) -> Vec<(String, DecodeState)> {
        let mut states = vec![("boundary".to_string(), DecodeState::INITIAL)];
        for slot in 0..self.slot_count() {
            for (suffix, tokens) in [("empty", 0), ("open", 1)] {
                if slot == 0 && tokens == 0 {
                    // only reachable as the boundary state
                    continue;
                }
                states.push((
                    format!("slot{slot}:{suffix}"),
                    DecodeState {
                        slot_index: slot,
                        tokens_in_slot: tokens,
                        at_object_boundary: false,
                        finished: false,
                    },
                ));
            }
        }
        states
    }

    /// Diagnostic matrix: one row per representative state, one `1`/`0`
    /// column per token id.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (label, state) in self.representative_states() {
            let mask = self.legal_tokens(&state).expect("state not finished");
            out.push_str(&format!("{label}\t{}\n", mask.to_bits()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::builtin_format;

    const NONE: [&str; 0] = [];

    fn ner_fixture() -> (FormatSpec, Vocabulary, MaskTable) {
        let spec = builtin_format("NER")
            .unwrap()
            .bind_tagset(&["person", "location"])
            .unwrap();
        // 5 specials + John lives here instance of person location = 12
        let vocab = Vocabulary::build(
            &["John lives here", "instance of person location"],
            &NONE,
        );
        let source = vocab.encode("John lives here");
        let table = compile_masks(&spec, &vocab, &source).unwrap();
        (spec, vocab, table)
    }

    fn ids(vocab: &Vocabulary, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| vocab.id(w).unwrap()).collect()
    }

    #[test]
    fn ner_content_masks_by_hand() {
        let (_, vocab, table) = ner_fixture();
        assert_eq!(vocab.len(), 12);
        let got = |slot| table.content_mask(slot).allowed_ids().collect::<Vec<_>>();
        assert_eq!(got(0), ids(&vocab, &["John", "lives", "here"]));
        assert_eq!(got(1), ids(&vocab, &["instance", "of"]));
        assert_eq!(got(2), ids(&vocab, &["person", "location"]));
        assert_eq!(table.content_mask(0).to_bits(), "000001110000");
        assert_eq!(table.content_mask(1).to_bits(), "000000001100");
        assert_eq!(table.content_mask(2).to_bits(), "000000000011");
    }

    #[test]
    fn any_slot_covers_all_content() {
        let spec = FormatSpec::parse("<ANY> </>").unwrap();
        let vocab = Vocabulary::build(&["a b c"], &NONE);
        let table = compile_masks(&spec, &vocab, &[]).unwrap();
        assert_eq!(table.content_mask(0).to_bits(), "00000111");
    }

    #[test]
    fn choice_outside_vocabulary_is_an_error() {
        let spec = FormatSpec::parse("<SOURCE> <;> LOC </>").unwrap();
        let vocab = Vocabulary::build(&["a b"], &NONE);
        assert_eq!(
            compile_masks(&spec, &vocab, &vocab.encode("a")),
            Err(MaskError::EmptyChoice { slot: 1 })
        );
    }

    #[test]
    fn unbound_tagset_is_an_error() {
        let spec = builtin_format("NER").unwrap();
        let vocab = Vocabulary::build(&["a"], &NONE);
        assert_eq!(
            compile_masks(&spec, &vocab, &[]),
            Err(MaskError::UnboundTagset { slot: 2 })
        );
    }

    #[test]
    fn separator_literals_must_agree() {
        let spec = FormatSpec::parse_with_separators("<ANY> ##", "||", "##").unwrap();
        let vocab = Vocabulary::build(&["a"], &NONE);
        assert!(matches!(
            compile_masks(&spec, &vocab, &[]),
            Err(MaskError::SeparatorMismatch { .. })
        ));
    }

    #[test]
    fn source_mask_skips_unknown_words() {
        let (spec, vocab, _) = ner_fixture();
        let table = compile_masks(&spec, &vocab, &vocab.encode("John Mary")).unwrap();
        assert_eq!(
            table.content_mask(0).allowed_ids().collect::<Vec<_>>(),
            ids(&vocab, &["John"])
        );
    }

    #[test]
    fn boundary_state_allows_eos_only_among_specials() {
        let (_, vocab, table) = ner_fixture();
        let s = vocab.specials();
        let m = table.legal_tokens(&DecodeState::INITIAL).unwrap();
        assert!(m.is_allowed(s.eos));
        assert!(!m.is_allowed(s.slot_sep));
        assert!(!m.is_allowed(s.obj_sep));
        assert!(!m.is_allowed(s.pad) && !m.is_allowed(s.unk));
        let content: Vec<_> = m.allowed_ids().filter(|&id| id != s.eos).collect();
        assert_eq!(content, table.content_mask(0).allowed_ids().collect::<Vec<_>>());
    }

    #[test]
    fn last_slot_allows_object_separator_only() {
        let (_, vocab, table) = ner_fixture();
        let s = vocab.specials();
        let state = DecodeState {
            slot_index: 2,
            tokens_in_slot: 2,
            at_object_boundary: false,
            finished: false,
        };
        let m = table.legal_tokens(&state).unwrap();
        assert!(m.is_allowed(s.obj_sep));
        assert!(!m.is_allowed(s.slot_sep));
        assert!(!m.is_allowed(s.eos));
    }

    #[test]
    fn three_slot_fsm_table() {
        // (slot, tokens, boundary) -> (slot_sep, obj_sep, eos) enumerated by hand
        let (_, vocab, table) = ner_fixture();
        let s = vocab.specials();
        let cases = [
            ((0, 0, true), (false, false, true)),
            ((0, 1, false), (true, false, false)),
            ((1, 0, false), (false, false, false)),
            ((1, 1, false), (true, false, false)),
            ((1, 3, false), (true, false, false)),
            ((2, 0, false), (false, false, false)),
            ((2, 1, false), (false, true, false)),
        ];
        for ((slot, tokens, boundary), expected) in cases {
            let state = DecodeState {
                slot_index: slot,
                tokens_in_slot: tokens,
                at_object_boundary: boundary,
                finished: false,
            };
            let m = table.legal_tokens(&state).unwrap();
            assert_eq!(
                (m.is_allowed(s.slot_sep), m.is_allowed(s.obj_sep), m.is_allowed(s.eos)),
                expected,
                "{state}"
            );
        }
    }

    #[test]
    fn advance_transitions() {
        let (_, vocab, table) = ner_fixture();
        let s = vocab.specials();
        let mid = DecodeState {
            slot_index: 1,
            tokens_in_slot: 1,
            at_object_boundary: false,
            finished: false,
        };
        let next = table.advance(&mid, s.slot_sep).unwrap();
        assert_eq!((next.slot_index, next.tokens_in_slot, next.at_object_boundary), (2, 0, false));

        let tail = DecodeState {
            slot_index: 2,
            tokens_in_slot: 1,
            ..mid
        };
        assert_eq!(table.advance(&tail, s.obj_sep).unwrap(), DecodeState::INITIAL);

        let done = table.advance(&DecodeState::INITIAL, s.eos).unwrap();
        assert!(done.finished);
        assert_eq!(table.advance(&done, s.eos), Err(MaskError::Finished));
        assert_eq!(table.legal_tokens(&done), Err(MaskError::Finished));
        assert_eq!(table.track(&done, s.slot_sep), done);

        let john = vocab.id("John").unwrap();
        let after = table.advance(&DecodeState::INITIAL, john).unwrap();
        assert_eq!((after.slot_index, after.tokens_in_slot, after.at_object_boundary), (0, 1, false));
        assert!(matches!(
            table.advance(&tail, s.slot_sep),
            Err(MaskError::IllegalToken { .. })
        ));
    }

    #[test]
    fn empty_source_only_permits_eos() {
        let (spec, vocab, _) = ner_fixture();
        let table = compile_masks(&spec, &vocab, &vocab.encode("Mary")).unwrap();
        assert!(!table.objects_possible());
        let m = table.legal_tokens(&DecodeState::INITIAL).unwrap();
        assert_eq!(m.allowed_ids().collect::<Vec<_>>(), vec![vocab.specials().eos]);
    }

    #[test]
    fn mask_soundness_on_fixture() {
        let (_, _, table) = ner_fixture();
        for (_, state) in table.representative_states() {
            let mask = table.legal_tokens(&state).unwrap();
            for tok in 0..table.vocab_size() as TokenId {
                assert_eq!(
                    table.advance(&state, tok).is_ok(),
                    mask.is_allowed(tok),
                    "{state} token {tok}"
                );
            }
        }
    }

    #[test]
    fn dump_rows() {
        let (_, _, table) = ner_fixture();
        let dump = table.dump();
        let lines: Vec<_> = dump.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "boundary\t001001110000");
        assert_eq!(lines[1], "slot0:open\t000101110000");
        assert_eq!(lines[5], "slot2:open\t000010000011");
    }
}
