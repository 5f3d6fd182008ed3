//! Seeded generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotforge::decoder::{LogitsProvider, ProviderError};
use slotforge::format::{FormatSpec, SlotSpec, DEFAULT_OBJ_SEP, DEFAULT_SLOT_SEP};
use slotforge::mask::{DecodeState, MaskTable};
use slotforge::matrix::Matrix;
use slotforge::vocab::{SpecialIds, TokenId, TokenSeq, Vocabulary, SPECIAL_COUNT};

pub const NONE: [&str; 0] = [];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random format over words `w0..`, its vocabulary, a source sentence and
/// the compiled mask table.
pub struct Setup {
    pub spec: FormatSpec,
    pub vocab: Vocabulary,
    pub source: TokenSeq,
    pub table: MaskTable,
}

pub fn word_pool(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

pub fn random_slot(rng: &mut ChaCha8Rng, pool: &[String]) -> SlotSpec {
    match rng.random_range(0..3) {
        0 => SlotSpec::Any,
        1 => SlotSpec::Source,
        _ => {
            let mut choices: Vec<String> = Vec::new();
            for _ in 0..rng.random_range(1..=2) {
                let words: Vec<&str> = (0..rng.random_range(1..=2))
                    .map(|_| pool.choose(rng).unwrap().as_str())
                    .collect();
                let choice = words.join(" ");
                if !choices.contains(&choice) {
                    choices.push(choice);
                }
            }
            SlotSpec::Choice(choices)
        }
    }
}

/// `vocab_size` counts the five special tokens.
pub fn random_setup(rng: &mut ChaCha8Rng, vocab_size: usize, max_slots: usize) -> Setup {
    let pool = word_pool(vocab_size - SPECIAL_COUNT);
    let slots = (0..rng.random_range(1..=max_slots)).map(|_| random_slot(rng, &pool)).collect();
    let spec = FormatSpec::new(slots, DEFAULT_SLOT_SEP, DEFAULT_OBJ_SEP).unwrap();
    let vocab = Vocabulary::build(&pool, &NONE);
    let n_source = rng.random_range(1..=pool.len());
    let source_text: Vec<&str> = (0..n_source).map(|_| pool.choose(rng).unwrap().as_str()).collect();
    let source = vocab.encode(&source_text.join(" "));
    let table = MaskTable::compile(&spec, &vocab, &source).unwrap();
    Setup {
        spec,
        vocab,
        source,
        table,
    }
}

/// A well-formed target of at most `max_len` tokens (including `<EOS>`):
/// whole objects with one or two legal tokens per slot. At least one object
/// is included whenever a minimal one fits.
pub fn random_target(rng: &mut ChaCha8Rng, table: &MaskTable, max_len: usize) -> Vec<TokenId> {
    let s = table.specials();
    let mut out = Vec::new();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let mut object = Vec::new();
        for slot in 0..table.slot_count() {
            let legal: Vec<TokenId> = table.content_mask(slot).allowed_ids().collect();
            for _ in 0..rng.random_range(1..=2) {
                object.push(*legal.choose(rng).unwrap());
            }
            object.push(if slot + 1 == table.slot_count() { s.obj_sep } else { s.slot_sep });
        }
        if out.len() + object.len() + 1 > max_len {
            if out.is_empty() && attempts < 50 {
                continue;
            }
            break;
        }
        out.extend(object);
        if rng.random_bool(0.4) {
            break;
        }
    }
    out.push(s.eos);
    out
}

pub fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_flat(rows, cols, data).unwrap()
}

fn prefix_seed(seed: u64, prefix: &[TokenId]) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    prefix.hash(&mut h);
    h.finish()
}

/// Deterministic pseudo-random logits per prefix, drifting towards `<EOS>`
/// as the output grows.
#[derive(Debug, Clone)]
pub struct RandomProvider {
    pub seed: u64,
    pub vocab_size: usize,
}

impl LogitsProvider for RandomProvider {
    fn logits(&self, prefix: &[TokenId], _: &DecodeState, _: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        let mut r = rng(prefix_seed(self.seed, prefix));
        let mut z: Vec<f64> = (0..self.vocab_size).map(|_| r.random_range(-5.0..5.0)).collect();
        z[SpecialIds::FIXED.eos as usize] += 0.25 * prefix.len() as f64;
        Ok(z)
    }
}

/// Random logits with, at each step, a strong push towards one of: a slot
/// separator, an object separator, or a content word missing from the source.
#[derive(Debug, Clone)]
pub struct AdversarialProvider {
    pub seed: u64,
    pub vocab_size: usize,
}

impl LogitsProvider for AdversarialProvider {
    fn logits(&self, prefix: &[TokenId], _: &DecodeState, source: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        let mut r = rng(prefix_seed(self.seed ^ 0xad5e_12a1, prefix));
        let s = SpecialIds::FIXED;
        let mut z: Vec<f64> = (0..self.vocab_size).map(|_| r.random_range(-1.0..1.0)).collect();
        z[s.eos as usize] += 0.5 * prefix.len() as f64 - 4.0;
        let foreign: Vec<usize> = (SPECIAL_COUNT..self.vocab_size)
            .filter(|&v| !source.contains(&(v as TokenId)))
            .collect();
        let push = match r.random_range(0..3) {
            0 => s.slot_sep as usize,
            1 => s.obj_sep as usize,
            _ => *foreign.choose(&mut r).unwrap_or(&(s.slot_sep as usize)),
        };
        z[push] += 6.0;
        Ok(z)
    }
}
