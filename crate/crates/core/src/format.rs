//! The slot-format DSL.
//!
//! A format string describes one output object as a run of slots separated
//! by a slot separator and terminated by an object separator:
//!
//! ```text
//! <SOURCE> <;> instance of <;> tagset </>
//! ```
//!
//! Each slot is either `<ANY>` (any content token), `<SOURCE>` (tokens of the
//! input sentence), the placeholder `tagset` (a choice list bound later with
//! [`FormatSpec::bind_tagset`]), or literal text. Literal text is a choice
//! list; alternatives are separated by a standalone `|`, so a bound tagset
//! renders as `person | location | organization`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const DEFAULT_SLOT_SEP: &str = "<;>";
pub const DEFAULT_OBJ_SEP: &str = "</>";
pub const ANY_LITERAL: &str = "<ANY>";
pub const SOURCE_LITERAL: &str = "<SOURCE>";
pub const TAGSET_PLACEHOLDER: &str = "tagset";
/// Separates alternatives inside a choice slot.
pub const CHOICE_DELIMITER: &str = "|";

/// Task formats, keyed by task name. Tagset slots are left unbound.
pub const BUILTIN_FORMATS: [(&str, &str); 5] = [
    ("NER", "<SOURCE> <;> instance of <;> tagset </>"),
    ("RE", "<SOURCE> <;> tagset <;> <SOURCE> </>"),
    ("SRL", "<SOURCE> <;> instance of <;> tagset </>"),
    ("ID", "intent <;> is <;> tagset </>"),
    ("DST", "[User] <;> <SOURCE> <;> <ANY> </>"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Any,
    Source,
    Choice,
}

/// One slot of a format.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SlotSpec {
    Any,
    Source,
    /// Ordered, deduplicated alternatives. Each is single-space normalized.
    Choice(Vec<String>),
    /// A `tagset` placeholder that must be bound before masks can be compiled.
    UnboundTagset,
}

impl SlotSpec {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotSpec::Any => SlotKind::Any,
            SlotSpec::Source => SlotKind::Source,
            SlotSpec::Choice(_) | SlotSpec::UnboundTagset => SlotKind::Choice,
        }
    }

    /// Bound choices; empty for every other slot kind.
    pub fn choices(&self) -> &[String] {
        match self {
            SlotSpec::Choice(c) => c,
            _ => &[],
        }
    }

    pub fn is_unbound(&self) -> bool {
        matches!(self, SlotSpec::UnboundTagset)
    }

    /// The slot as it appears in a format string.
    pub fn render(&self) -> String {
        match self {
            SlotSpec::Any => ANY_LITERAL.to_string(),
            SlotSpec::Source => SOURCE_LITERAL.to_string(),
            SlotSpec::UnboundTagset => TAGSET_PLACEHOLDER.to_string(),
            SlotSpec::Choice(c) => c.join(&format!(" {CHOICE_DELIMITER} ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("format parse error at offset {position}: {message}")]
pub struct FormatParseError {
    /// Character offset into the input.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error(transparent)]
    Parse(#[from] FormatParseError),
    #[error("format has no slots")]
    NoSlots,
    #[error("invalid separators {slot_sep:?} / {obj_sep:?}: {reason}")]
    BadSeparators {
        slot_sep: String,
        obj_sep: String,
        reason: &'static str,
    },
    #[error("invalid choice {choice:?} in slot {slot}: {reason}")]
    BadChoice {
        slot: usize,
        choice: String,
        reason: &'static str,
    },
    #[error("format has no unbound tagset slot")]
    NoTagsetSlot,
    #[error("tag list is empty")]
    EmptyTagset,
    #[error("duplicate tag {0:?}")]
    DuplicateTag(String),
    #[error("unknown builtin task {0:?}")]
    UnknownTask(String),
}

/// A parsed output format. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FormatSpec {
    slots: Vec<SlotSpec>,
    slot_sep: String,
    obj_sep: String,
}

impl FormatSpec {
    pub fn new(
        slots: Vec<SlotSpec>,
        slot_sep: impl Into<String>,
        obj_sep: impl Into<String>,
    ) -> Result<Self, SpecError> {
        let spec = Self {
            slots,
            slot_sep: slot_sep.into(),
            obj_sep: obj_sep.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a format string using the default `<;>` / `</>` separators.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        Self::parse_with_separators(text, DEFAULT_SLOT_SEP, DEFAULT_OBJ_SEP)
    }

    pub fn parse_with_separators(
        text: &str,
        slot_sep: &str,
        obj_sep: &str,
    ) -> Result<Self, SpecError> {
        check_separators(slot_sep, obj_sep)?;
        let atoms = atoms(text);
        let Some(&(last_pos, last)) = atoms.last() else {
            return Err(parse_error(0, "empty format string"));
        };

        for &(pos, atom) in &atoms {
            if atom != slot_sep
                && atom != obj_sep
                && (atom.contains(slot_sep) || atom.contains(obj_sep))
            {
                return Err(parse_error(pos, format!("separator nested inside {atom:?}")));
            }
        }
        if last != obj_sep {
            let end = last_pos + last.chars().count();
            return Err(parse_error(
                end,
                format!("missing terminal object separator {obj_sep:?}"),
            ));
        }

        let body = &atoms[..atoms.len() - 1];
        if let Some(&(pos, _)) = body.iter().find(|(_, a)| *a == obj_sep) {
            return Err(parse_error(
                pos,
                "nested object separator: a format describes exactly one object",
            ));
        }

        let mut slots = Vec::new();
        let mut group: Vec<(usize, &str)> = Vec::new();
        for &(pos, atom) in body.iter().chain(std::iter::once(&(last_pos, last))) {
            if atom == slot_sep || atom == obj_sep {
                if group.is_empty() {
                    return Err(parse_error(pos, "empty slot"));
                }
                slots.push(parse_slot(&group)?);
                group.clear();
            } else {
                group.push((pos, atom));
            }
        }

        Self::new(slots, slot_sep, obj_sep)
    }

    /// Canonical single-space rendering. Re-parsing it yields `self`.
    pub fn render(&self) -> String {
        let mut out = self
            .slots
            .iter()
            .map(SlotSpec::render)
            .collect::<Vec<_>>()
            .join(&format!(" {} ", self.slot_sep));
        out.push(' ');
        out.push_str(&self.obj_sep);
        out
    }

    /// Replaces every unbound tagset slot by a choice over `tags`.
    pub fn bind_tagset<S: AsRef<str>>(&self, tags: &[S]) -> Result<Self, SpecError> {
        if !self.slots.iter().any(SlotSpec::is_unbound) {
            return Err(SpecError::NoTagsetSlot);
        }
        if tags.is_empty() {
            return Err(SpecError::EmptyTagset);
        }
        let mut seen = HashSet::new();
        let mut normalized = Vec::with_capacity(tags.len());
        for tag in tags {
            let tag = normalize(tag.as_ref());
            if !seen.insert(tag.clone()) {
                return Err(SpecError::DuplicateTag(tag));
            }
            normalized.push(tag);
        }
        let slots = self
            .slots
            .iter()
            .map(|s| match s {
                SlotSpec::UnboundTagset => SlotSpec::Choice(normalized.clone()),
                other => other.clone(),
            })
            .collect();
        Self::new(slots, self.slot_sep.clone(), self.obj_sep.clone())
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_sep(&self) -> &str {
        &self.slot_sep
    }

    pub fn obj_sep(&self) -> &str {
        &self.obj_sep
    }

    pub fn is_bound(&self) -> bool {
        !self.slots.iter().any(SlotSpec::is_unbound)
    }

    pub fn has_unbound_tagset(&self) -> bool {
        !self.is_bound()
    }

    fn validate(&self) -> Result<(), SpecError> {
        check_separators(&self.slot_sep, &self.obj_sep)?;
        if self.slots.is_empty() {
            return Err(SpecError::NoSlots);
        }
        for (slot, spec) in self.slots.iter().enumerate() {
            let SlotSpec::Choice(choices) = spec else {
                continue;
            };
            if choices.is_empty() {
                return Err(SpecError::BadChoice {
                    slot,
                    choice: String::new(),
                    reason: "choice slot needs at least one alternative",
                });
            }
            let mut seen = HashSet::new();
            for choice in choices {
                let bad = |reason| SpecError::BadChoice {
                    slot,
                    choice: choice.clone(),
                    reason,
                };
                if choice.trim().is_empty() {
                    return Err(bad("empty choice"));
                }
                if *choice != normalize(choice) {
                    return Err(bad("choice must be single-space normalized"));
                }
                if choice.contains(&self.slot_sep) || choice.contains(&self.obj_sep) {
                    return Err(bad("choice contains a separator"));
                }
                if choice.split(' ').any(|a| {
                    a == CHOICE_DELIMITER || a == ANY_LITERAL || a == SOURCE_LITERAL
                }) || choice == TAGSET_PLACEHOLDER
                {
                    return Err(bad("choice contains a reserved atom"));
                }
                if !seen.insert(choice) {
                    return Err(bad("duplicate choice"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for FormatSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

pub fn parse_format(text: &str) -> Result<FormatSpec, SpecError> {
    FormatSpec::parse(text)
}

pub fn render_format(spec: &FormatSpec) -> String {
    spec.render()
}

pub fn bind_tagset<S: AsRef<str>>(spec: &FormatSpec, tags: &[S]) -> Result<FormatSpec, SpecError> {
    spec.bind_tagset(tags)
}

/// The built-in task formats, keyed by task name, with tagsets unbound.
pub fn builtin_formats() -> BTreeMap<&'static str, FormatSpec> {
    BUILTIN_FORMATS
        .iter()
        .map(|(name, text)| (*name, FormatSpec::parse(text).expect("builtin format parses")))
        .collect()
}

pub fn builtin_format(task: &str) -> Result<FormatSpec, SpecError> {
    BUILTIN_FORMATS
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(task))
        .map(|(_, text)| FormatSpec::parse(text).expect("builtin format parses"))
        .ok_or_else(|| SpecError::UnknownTask(task.to_string()))
}

/// Collapses runs of whitespace to single spaces and trims.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_slot(group: &[(usize, &str)]) -> Result<SlotSpec, SpecError> {
    if let [(_, atom)] = group {
        match *atom {
            ANY_LITERAL => return Ok(SlotSpec::Any),
            SOURCE_LITERAL => return Ok(SlotSpec::Source),
            TAGSET_PLACEHOLDER => return Ok(SlotSpec::UnboundTagset),
            _ => {}
        }
    }
    if let Some(&(pos, atom)) = group
        .iter()
        .find(|(_, a)| *a == ANY_LITERAL || *a == SOURCE_LITERAL)
    {
        return Err(parse_error(pos, format!("{atom} must be the only atom in its slot")));
    }

    let mut choices = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for &(pos, atom) in group {
        if atom == CHOICE_DELIMITER {
            if current.is_empty() {
                return Err(parse_error(pos, "empty choice"));
            }
            choices.push(current.join(" "));
            current.clear();
        } else {
            current.push(atom);
        }
    }
    if current.is_empty() {
        let (pos, _) = group[group.len() - 1];
        return Err(parse_error(pos, "empty choice"));
    }
    choices.push(current.join(" "));
    Ok(SlotSpec::Choice(choices))
}

fn check_separators(slot_sep: &str, obj_sep: &str) -> Result<(), SpecError> {
    let bad = |reason| SpecError::BadSeparators {
        slot_sep: slot_sep.to_string(),
        obj_sep: obj_sep.to_string(),
        reason,
    };
    if slot_sep.is_empty() || obj_sep.is_empty() {
        return Err(bad("separators must be non-empty"));
    }
    if slot_sep.chars().any(char::is_whitespace) || obj_sep.chars().any(char::is_whitespace) {
        return Err(bad("separators must not contain whitespace"));
    }
    if slot_sep == obj_sep {
        return Err(bad("slot and object separators must differ"));
    }
    if slot_sep == CHOICE_DELIMITER || obj_sep == CHOICE_DELIMITER {
        return Err(bad("separators must differ from the choice delimiter"));
    }
    Ok(())
}

fn parse_error(position: usize, message: impl Into<String>) -> SpecError {
    SpecError::Parse(FormatParseError {
        position,
        message: message.into(),
    })
}

/// Whitespace-separated atoms with their character offsets.
fn atoms(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (char_idx, (byte_idx, ch)) in text.char_indices().enumerate() {
        if ch.is_whitespace() {
            if let Some((c, b)) = start.take() {
                out.push((c, &text[b..byte_idx]));
            }
        } else if start.is_none() {
            start = Some((char_idx, byte_idx));
        }
    }
    if let Some((c, b)) = start {
        out.push((c, &text[b..]));
    }
    out
}
