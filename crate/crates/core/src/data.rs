//! Datasets: JSONL exchange, gold-target filtering, and a seeded generator
//! of small synthetic extraction tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{builtin_format, FormatSpec, SpecError};
use crate::losses::{align_target, AlignError};
use crate::vocab::{TokenSeq, Vocabulary, EOS_LITERAL};

/// Target string of an example with no objects.
pub const EMPTY_OUTPUT: &str = EOS_LITERAL;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub input: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

/// A model output keyed by example id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub output: String,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("fraction {fraction} keeps {kept} examples, fewer than the {tags} distinct tags")]
    TooFew {
        fraction: f64,
        kept: usize,
        tags: usize,
    },
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DataError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], out: W) -> Result<(), DataError> {
    let mut out = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>, DataError> {
    let examples: Vec<Example> = read_jsonl(BufReader::new(File::open(path)?))?;
    for (i, ex) in examples.iter().enumerate() {
        if ex.input.trim().is_empty() || ex.target.trim().is_empty() {
            return Err(DataError::Line {
                line: i + 1,
                message: format!("example {:?} has an empty input or target", ex.id),
            });
        }
    }
    Ok(examples)
}

pub fn save_jsonl(examples: &[Example], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_jsonl(examples, File::create(path)?)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, DataError> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn save_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_jsonl(preds, File::create(path)?)
}

/// Token ids of a target string, terminated by `<EOS>`.
pub fn encode_target(vocab: &Vocabulary, target: &str) -> TokenSeq {
    let mut seq = vocab.encode(target);
    if seq.last() != Some(&vocab.specials().eos) {
        seq.push(vocab.specials().eos);
    }
    seq
}

/// The format an example is checked against: `template` itself when it is
/// fully bound, otherwise `template` bound to the example's own tags.
pub fn spec_for(template: &FormatSpec, example: &Example) -> Result<FormatSpec, SpecError> {
    if !template.has_unbound_tagset() {
        return Ok(template.clone());
    }
    match &example.tags {
        Some(tags) => template.bind_tagset(tags),
        None => Err(SpecError::EmptyTagset),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DropReason {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub example: Example,
    pub reason: DropReason,
}

/// Splits `examples` into those whose gold target aligns with the format and
/// those that violate it. Order is preserved on both sides.
pub fn filter_violations(
    examples: &[Example],
    template: &FormatSpec,
    vocab: &Vocabulary,
) -> (Vec<Example>, Vec<Dropped>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for ex in examples {
        match check_example(ex, template, vocab) {
            Ok(()) => kept.push(ex.clone()),
            Err(reason) => dropped.push(Dropped {
                example: ex.clone(),
                reason,
            }),
        }
    }
    if !dropped.is_empty() {
        log::info!("dropped {} of {} examples with format-violating targets", dropped.len(), examples.len());
    }
    (kept, dropped)
}

fn check_example(ex: &Example, template: &FormatSpec, vocab: &Vocabulary) -> Result<(), DropReason> {
    let spec = spec_for(template, ex)?;
    let target = encode_target(vocab, &ex.target);
    align_target(&spec, vocab, &target, &vocab.encode(&ex.input))?;
    Ok(())
}

/// Vocabulary over every input, target and tag of `examples`.
pub fn build_vocab(examples: &[Example]) -> Vocabulary {
    let corpus: Vec<&str> = examples
        .iter()
        .flat_map(|ex| [ex.input.as_str(), ex.target.as_str()])
        .collect();
    let tags: Vec<&str> = examples
        .iter()
        .flat_map(|ex| ex.tags.iter().flatten())
        .map(String::as_str)
        .collect();
    Vocabulary::build(&corpus, &tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskShape {
    /// 0-3 entities, each introduced by a trigger word that fixes its tag.
    NerLike,
    /// One head/tail pair; the trigger before the head fixes the relation.
    ReLike,
    /// One cue word fixes the sentence label.
    IdLike,
}

impl TaskShape {
    pub fn task_name(self) -> &'static str {
        match self {
            TaskShape::NerLike => "NER",
            TaskShape::ReLike => "RE",
            TaskShape::IdLike => "ID",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_examples: usize,
    /// Number of distinct content words (fillers plus entities).
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub n_tags: usize,
    pub task_shape: TaskShape,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(task_shape: TaskShape, n_examples: usize, seed: u64) -> Self {
        Self {
            n_examples,
            vocab_size: 60,
            max_source_len: 12,
            n_tags: 3,
            task_shape,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_examples == 0 {
            return bad("n_examples must be positive");
        }
        if self.n_tags < 2 || self.n_tags > MAX_TAGS {
            return bad("n_tags must be between 2 and 6");
        }
        if self.vocab_size < 8 {
            return bad("vocab_size must be at least 8");
        }
        if self.max_source_len < 4 {
            return bad("max_source_len must be at least 4");
        }
        Ok(())
    }
}

const MAX_TAGS: usize = 6;
const NER_TAGS: [&str; MAX_TAGS] = ["person", "location", "organization", "product", "terminology", "event"];
const RE_TAGS: [&str; MAX_TAGS] = ["work for", "live in", "located in", "part of", "founded by", "born in"];
const ID_TAGS: [&str; MAX_TAGS] = ["weather", "music", "booking", "alarm", "news", "greeting"];
const TRIGGERS_PER_TAG: usize = 2;
const TAIL_MARKER: &str = "to";

/// The tag names used by [`gen_synthetic`] for a shape and tag count.
pub fn synthetic_tags(shape: TaskShape, n_tags: usize) -> Vec<String> {
    let names = match shape {
        TaskShape::NerLike => &NER_TAGS,
        TaskShape::ReLike => &RE_TAGS,
        TaskShape::IdLike => &ID_TAGS,
    };
    names[..n_tags.min(MAX_TAGS)].iter().map(|s| s.to_string()).collect()
}

/// Generates a deterministic dataset. Fillers are `w{i}`, entities `e{i}`,
/// and trigger/cue words `t{j}`, with trigger `j` selecting tag `j % n_tags`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Example>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_entities = (cfg.vocab_size / 4).max(4);
    let fillers: Vec<String> = (0..cfg.vocab_size - n_entities).map(|i| format!("w{i}")).collect();
    let entities: Vec<String> = (0..n_entities).map(|i| format!("e{i}")).collect();
    let tags = synthetic_tags(cfg.task_shape, cfg.n_tags);
    let trigger = |tag: usize, rng: &mut ChaCha8Rng| {
        format!("t{}", tag + cfg.n_tags * rng.random_range(0..TRIGGERS_PER_TAG))
    };
    let mut out = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let len = rng.random_range(4..=cfg.max_source_len);
        let (units, target) = match cfg.task_shape {
            TaskShape::NerLike => {
                let k = rng.random_range(0..=3usize.min(len / 2));
                let picked: Vec<&String> = entities.choose_multiple(&mut rng, k).collect();
                let mut units: Vec<Vec<String>> = Vec::new();
                let mut tagged = Vec::new();
                for e in picked {
                    let tag = rng.random_range(0..cfg.n_tags);
                    units.push(vec![trigger(tag, &mut rng), e.clone()]);
                    tagged.push((e.clone(), tag));
                }
                let units = scatter(units, len - 2 * k, &fillers, &mut rng, false);
                // Targets list entities in source order.
                let order = |e: &String| units.iter().position(|u| u.last() == Some(e));
                tagged.sort_by_key(|(e, _)| order(e));
                let target: String = tagged
                    .iter()
                    .map(|(e, tag)| format!("{e} <;> instance of <;> {} </> ", tags[*tag]))
                    .collect();
                (units, target)
            }
            TaskShape::ReLike => {
                let pair: Vec<&String> = entities.choose_multiple(&mut rng, 2).collect();
                let tag = rng.random_range(0..cfg.n_tags);
                let units = vec![
                    vec![trigger(tag, &mut rng), pair[0].clone()],
                    vec![TAIL_MARKER.to_string(), pair[1].clone()],
                ];
                let units = scatter(units, len - 4, &fillers, &mut rng, true);
                (units, format!("{} <;> {} <;> {} </>", pair[0], tags[tag], pair[1]))
            }
            TaskShape::IdLike => {
                let tag = rng.random_range(0..cfg.n_tags);
                let units = scatter(vec![vec![trigger(tag, &mut rng)]], len - 1, &fillers, &mut rng, false);
                (units, format!("intent <;> is <;> {} </>", tags[tag]))
            }
        };
        let target = target.trim().to_string();
        out.push(Example {
            id: format!("{}-{i}", cfg.task_shape.task_name().to_lowercase()),
            task: cfg.task_shape.task_name().to_string(),
            input: units.concat().join(" "),
            target: if target.is_empty() { EMPTY_OUTPUT.to_string() } else { target },
            tags: Some(tags.clone()),
        });
    }
    Ok(out)
}

// Interleaves `units` with `n_fillers` single filler words at random
// positions. With `keep_order` the units keep their relative order.
fn scatter(
    mut units: Vec<Vec<String>>,
    n_fillers: usize,
    fillers: &[String],
    rng: &mut ChaCha8Rng,
    keep_order: bool,
) -> Vec<Vec<String>> {
    if !keep_order {
        units.shuffle(rng);
    }
    let mut slots: Vec<Option<usize>> = (0..units.len()).map(Some).collect();
    slots.extend(std::iter::repeat_n(None, n_fillers));
    slots.shuffle(rng);
    let mut next = 0;
    slots
        .into_iter()
        .map(|slot| match slot {
            Some(_) => {
                next += 1;
                units[next - 1].clone()
            }
            None => vec![fillers.choose(rng).expect("fillers non-empty").clone()],
        })
        .collect()
}

/// Tags of `example.tags` that occur as a whole slot of its target.
pub fn target_labels(example: &Example) -> BTreeSet<String> {
    let Some(tags) = &example.tags else {
        return BTreeSet::new();
    };
    let tags: BTreeSet<&str> = tags.iter().map(String::as_str).collect();
    example
        .target
        .split(crate::format::DEFAULT_OBJ_SEP)
        .flat_map(|obj| obj.split(crate::format::DEFAULT_SLOT_SEP))
        .map(str::trim)
        .filter(|s| tags.contains(s))
        .map(str::to_string)
        .collect()
}

/// Label-proportional subsample of `round(fraction * n)` examples that keeps
/// at least one example of every tag. Examples are stratified by their first
/// label (in sorted order); the output preserves input order.
pub fn subsample(examples: &[Example], fraction: f64, seed: u64) -> Result<Vec<Example>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let labels: Vec<BTreeSet<String>> = examples.iter().map(target_labels).collect();
    let all_tags: BTreeSet<&String> = labels.iter().flatten().collect();
    let n = (fraction * examples.len() as f64).round() as usize;
    if n < all_tags.len().max(1) {
        return Err(DataError::TooFew {
            fraction,
            kept: n,
            tags: all_tags.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; examples.len()];
    for tag in &all_tags {
        if (0..examples.len()).any(|i| chosen[i] && labels[i].contains(*tag)) {
            continue;
        }
        let holders: Vec<usize> = (0..examples.len()).filter(|&i| labels[i].contains(*tag)).collect();
        chosen[*holders.choose(&mut rng).expect("tag comes from some example")] = true;
    }
    let remaining = n - chosen.iter().filter(|&&c| c).count();
    let mut strata: BTreeMap<Option<&String>, Vec<usize>> = BTreeMap::new();
    for i in (0..examples.len()).filter(|&i| !chosen[i]) {
        strata.entry(labels[i].first()).or_default().push(i);
    }
    let pool: usize = strata.values().map(Vec::len).sum();
    let quotas = largest_remainder(&strata_sizes(&strata), remaining, pool);
    for (members, quota) in strata.values_mut().zip(quotas) {
        members.shuffle(&mut rng);
        members.iter().take(quota).for_each(|&i| chosen[i] = true);
    }
    Ok(examples
        .iter()
        .zip(chosen)
        .filter(|(_, c)| *c)
        .map(|(ex, _)| ex.clone())
        .collect())
}

fn strata_sizes<K>(strata: &BTreeMap<K, Vec<usize>>) -> Vec<usize> {
    strata.values().map(Vec::len).collect()
}

// Splits `total` over groups proportionally to `sizes` (summing to `pool`),
// rounding by largest remainder with ties to the earlier group.
fn largest_remainder(sizes: &[usize], total: usize, pool: usize) -> Vec<usize> {
    if pool == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * total / pool).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&g| std::cmp::Reverse((sizes[g] * total) % pool));
    let short = total - quotas.iter().sum::<usize>();
    for &g in order.iter().take(short) {
        quotas[g] += 1;
    }
    quotas
}

/// Builtin format for a synthetic shape, still carrying its tagset slot.
pub fn synthetic_format(shape: TaskShape) -> FormatSpec {
    builtin_format(shape.task_name()).expect("synthetic shapes are builtin tasks")
}
