//! Output parsing, format-error classification and scoring.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{normalize, FormatSpec, SlotSpec};
use crate::vocab::EOS_LITERAL;

/// One generated object: its slot strings in order.
pub type Tuple = Vec<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FormatErrorKind {
    LengthMismatch,
    SourceMismatch,
    TagsetMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub object_index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeCounts {
    #[serde(rename = "fe_length")]
    pub length: usize,
    #[serde(rename = "fe_source")]
    pub source: usize,
    #[serde(rename = "fe_tagset")]
    pub tagset: usize,
}

impl FeCounts {
    pub fn total(&self) -> usize {
        self.length + self.source + self.tagset
    }

    pub fn record(&mut self, kind: FormatErrorKind) {
        match kind {
            FormatErrorKind::LengthMismatch => self.length += 1,
            FormatErrorKind::SourceMismatch => self.source += 1,
            FormatErrorKind::TagsetMismatch => self.tagset += 1,
        }
    }
}

impl std::ops::AddAssign for FeCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.length += rhs.length;
        self.source += rhs.source;
        self.tagset += rhs.tagset;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    /// Every object segment in output order, including malformed ones.
    pub objects: Vec<Tuple>,
    pub errors: Vec<FormatError>,
}

impl ParsedOutput {
    pub fn is_clean(&self, object_index: usize) -> bool {
        !self.errors.iter().any(|e| e.object_index == object_index)
    }

    /// Error-free objects, deduplicated.
    pub fn clean_tuples(&self) -> BTreeSet<Tuple> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_clean(*i))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn fe_counts(&self) -> FeCounts {
        let mut counts = FeCounts::default();
        self.errors.iter().for_each(|e| counts.record(e.kind));
        counts
    }
}

/// Splits `text` into object segments and slots without validating them.
/// A trailing `<EOS>` is ignored; an unterminated final segment is kept.
pub fn split_objects(text: &str, spec: &FormatSpec) -> Vec<Tuple> {
    let mut atoms: Vec<&str> = text.split_whitespace().collect();
    while atoms.last() == Some(&EOS_LITERAL) {
        atoms.pop();
    }
    let mut objects = Vec::new();
    let mut slots: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut pending = false;
    for atom in atoms {
        if atom == spec.obj_sep() {
            slots.push(current.join(" "));
            objects.push(std::mem::take(&mut slots));
            current.clear();
            pending = false;
        } else if atom == spec.slot_sep() {
            slots.push(current.join(" "));
            current.clear();
            pending = true;
        } else {
            current.push(atom);
            pending = true;
        }
    }
    if pending {
        slots.push(current.join(" "));
        objects.push(slots);
    }
    objects
}

/// Parses a generated string and classifies format errors per object.
///
/// An object with the wrong number of slots, or with an empty slot, is a
/// length mismatch and is not checked further. Otherwise every `<SOURCE>`
/// slot must consist of source tokens and every choice slot must equal one of
/// its alternatives. `<ANY>` slots never err. At most one error of each kind
/// is recorded per object.
pub fn parse_output(text: &str, spec: &FormatSpec, source: &str) -> ParsedOutput {
    let source_tokens: HashSet<&str> = source.split_whitespace().collect();
    let objects = split_objects(text, spec);
    let mut errors = Vec::new();
    for (object_index, slots) in objects.iter().enumerate() {
        if slots.len() != spec.slot_count() || slots.iter().any(|s| s.is_empty()) {
            errors.push(FormatError {
                kind: FormatErrorKind::LengthMismatch,
                object_index,
                detail: format!(
                    "{} non-empty slots of {}, format has {}",
                    slots.iter().filter(|s| !s.is_empty()).count(),
                    slots.len(),
                    spec.slot_count()
                ),
            });
            continue;
        }
        let mut foreign = Vec::new();
        let mut bad_tags = Vec::new();
        for (slot, value) in spec.slots().iter().zip(slots) {
            match slot {
                SlotSpec::Source => foreign.extend(
                    value
                        .split(' ')
                        .filter(|tok| !source_tokens.contains(tok))
                        .map(str::to_string),
                ),
                SlotSpec::Choice(choices) => {
                    let value = normalize(value);
                    if !choices.contains(&value) {
                        bad_tags.push(value);
                    }
                }
                SlotSpec::Any | SlotSpec::UnboundTagset => {}
            }
        }
        if !foreign.is_empty() {
            errors.push(FormatError {
                kind: FormatErrorKind::SourceMismatch,
                object_index,
                detail: format!("not in source: {}", foreign.join(", ")),
            });
        }
        if !bad_tags.is_empty() {
            errors.push(FormatError {
                kind: FormatErrorKind::TagsetMismatch,
                object_index,
                detail: format!("not in tagset: {}", bad_tags.join(", ")),
            });
        }
    }
    ParsedOutput { objects, errors }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{preds} predictions but {golds} gold examples")]
    LengthMismatch { preds: usize, golds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub joint_accuracy: Option<f64>,
    #[serde(flatten)]
    pub fe_counts: FeCounts,
    pub n_examples: usize,
}

impl ScoreReport {
    pub fn with_format_errors(mut self, fe_counts: FeCounts) -> Self {
        self.fe_counts = fe_counts;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Harmonic mean with `0/0 = 0`.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged precision, recall and F1 over exact tuple matches.
pub fn micro_f1<T: Ord>(preds: &[BTreeSet<T>], golds: &[BTreeSet<T>]) -> Result<ScoreReport, EvalError> {
    check_aligned(preds.len(), golds.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(ScoreReport {
        precision,
        recall,
        micro_f1: f1(precision, recall),
        joint_accuracy: None,
        fe_counts: FeCounts::default(),
        n_examples: preds.len(),
    })
}

/// Fraction of examples whose predicted set equals the gold set.
pub fn joint_accuracy<T: Ord>(preds: &[BTreeSet<T>], golds: &[BTreeSet<T>]) -> Result<f64, EvalError> {
    check_aligned(preds.len(), golds.len())?;
    let exact = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(ratio(exact, preds.len()))
}

fn check_aligned(preds: usize, golds: usize) -> Result<(), EvalError> {
    if preds == golds {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { preds, golds })
    }
}

/// Tuples of a joint entity/relation output routed to their task.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JerSplit {
    pub entities: BTreeSet<Tuple>,
    pub relations: BTreeSet<Tuple>,
    /// Tuples matching neither signature. They are also inserted into both
    /// streams so that they count as false positives for each.
    pub unroutable: usize,
}

/// Routes each object by its middle slot: a value among the entity format's
/// middle choices (e.g. `instance of`) marks an entity, a value among the
/// relation format's middle choices marks a relation.
pub fn split_jer(parsed: &ParsedOutput, entity_spec: &FormatSpec, relation_spec: &FormatSpec) -> JerSplit {
    let matches = |spec: &FormatSpec, tuple: &Tuple| {
        tuple.len() == spec.slot_count()
            && spec
                .slots()
                .get(1)
                .is_some_and(|s| s.choices().contains(&normalize(&tuple[1])))
    };
    let mut split = JerSplit::default();
    for tuple in &parsed.objects {
        if matches(entity_spec, tuple) {
            split.entities.insert(tuple.clone());
        } else if matches(relation_spec, tuple) {
            split.relations.insert(tuple.clone());
        } else {
            split.unroutable += 1;
            split.entities.insert(tuple.clone());
            split.relations.insert(tuple.clone());
        }
    }
    split
}
