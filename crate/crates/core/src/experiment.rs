//! The {CE, CE+FL} x {plain, formatted} ablation on synthetic data.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, filter_violations, gen_synthetic, spec_for, synthetic_format, Example, SyntheticConfig, TaskShape};
use crate::decoder::{greedy_decode, DecodeConfig, DecodeError};
use crate::eval::{micro_f1, parse_output, FeCounts, Tuple};
use crate::format::FormatSpec;
use crate::losses::LossWeights;
use crate::toylm::{prepare, ModelError, PreparedExample, ToyLm, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub shape: TaskShape,
    pub n_train: usize,
    pub n_test: usize,
    /// Distinct content words of the generated data.
    pub vocab_size: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub init_scale: f64,
    pub max_len: usize,
    /// Weights of the CE+FL arm; the CE arm uses `(1, 0, 0)`.
    pub fl_weights: LossWeights,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            shape: TaskShape::NerLike,
            n_train: 500,
            n_test: 200,
            vocab_size: 60,
            seeds: (0..5).collect(),
            epochs: 2,
            lr: 0.3,
            init_scale: 0.0,
            max_len: 64,
            fl_weights: LossWeights::DEFAULT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossArm {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "CE+FL")]
    CeFl,
}

impl LossArm {
    pub fn label(self) -> &'static str {
        match self {
            LossArm::Ce => "CE",
            LossArm::CeFl => "CE+FL",
        }
    }
}

/// Score and format errors of one model on one test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub loss: LossArm,
    pub formatted: bool,
    pub seed: u64,
    pub micro_f1: f64,
    #[serde(flatten)]
    pub fe: FeCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub loss: LossArm,
    pub formatted: bool,
    pub median_f1: f64,
    pub median_fe: f64,
    pub median_fe_length: f64,
    pub median_fe_source: f64,
    pub median_fe_tagset: f64,
    pub max_fe_length: usize,
    pub max_fe_source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, loss: LossArm, formatted: bool) -> &CellSummary {
        self.cells
            .iter()
            .find(|c| c.loss == loss && c.formatted == formatted)
            .expect("every cell is summarized")
    }

    /// A fixed-width table: one row per cell.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:<5} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
            "loss", "FD", "F1", "FE", "FE.len", "FE.src", "FE.tag"
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{:<8} {:<5} {:>8.4} {:>8.1} {:>9.1} {:>9.1} {:>9.1}\n",
                c.loss.label(),
                if c.formatted { "yes" } else { "no" },
                c.median_f1,
                c.median_fe,
                c.median_fe_length,
                c.median_fe_source,
                c.median_fe_tagset
            ));
        }
        out
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Decodes every example and scores the outputs against the gold targets.
pub fn score_model(
    model: &ToyLm,
    examples: &[Example],
    prepared: &[PreparedExample],
    template: &FormatSpec,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<(f64, FeCounts), ExperimentError> {
    type Scored = (BTreeSet<Tuple>, BTreeSet<Tuple>, FeCounts);
    let outputs: Vec<Result<Scored, ExperimentError>> = examples
        .par_iter()
        .zip(prepared.par_iter())
        .map(|(ex, p)| {
            let out = greedy_decode(model, &p.table, cfg, &p.source)?;
            let text = vocab
                .decode(out.scored_tokens(&vocab.specials()))
                .expect("decoder emits in-vocabulary ids");
            let spec = spec_for(template, ex).map_err(|e| ModelError::Example {
                id: ex.id.clone(),
                reason: e.into(),
            })?;
            let parsed = parse_output(&text, &spec, &ex.input);
            let gold = parse_output(&ex.target, &spec, &ex.input).clean_tuples();
            Ok((parsed.clean_tuples(), gold, parsed.fe_counts()))
        })
        .collect();
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut fe = FeCounts::default();
    for r in outputs {
        let (p, g, c) = r?;
        preds.push(p);
        golds.push(g);
        fe += c;
    }
    Ok((micro_f1(&preds, &golds)?.micro_f1, fe))
}

fn run_seed(cfg: &AblationConfig, seed: u64) -> Result<Vec<CellResult>, ExperimentError> {
    let mut gen = SyntheticConfig::new(cfg.shape, cfg.n_train + cfg.n_test, seed);
    gen.vocab_size = cfg.vocab_size;
    let all = gen_synthetic(&gen)?;
    let (train, test) = all.split_at(cfg.n_train);
    let vocab = build_vocab(&all);
    let template = synthetic_format(cfg.shape);
    let (train, _) = filter_violations(train, &template, &vocab);
    let (test, _) = filter_violations(test, &template, &vocab);
    let train_p = prepare(&train, &template, &vocab)?;
    let test_p = prepare(&test, &template, &vocab)?;
    let mut results = Vec::new();
    for (loss, weights) in [(LossArm::Ce, LossWeights::cross_entropy_only()), (LossArm::CeFl, cfg.fl_weights)] {
        let mut model = ToyLm::for_format(&vocab, template.slot_count(), cfg.init_scale, seed);
        let tc = TrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: 1,
            weights,
            seed,
        };
        model.train(&train_p, &tc)?;
        for formatted in [false, true] {
            let dc = DecodeConfig {
                max_len: cfg.max_len,
                formatted,
                ..DecodeConfig::default()
            };
            let (micro_f1, fe) = score_model(&model, &test, &test_p, &template, &vocab, &dc)?;
            log::info!("seed {seed} {} fd={formatted}: f1 {micro_f1:.4} fe {}", loss.label(), fe.total());
            results.push(CellResult {
                loss,
                formatted,
                seed,
                micro_f1,
                fe,
            });
        }
    }
    Ok(results)
}

/// Runs every seed (in parallel) and summarizes each cell by its median.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport, ExperimentError> {
    let per_seed: Vec<Result<Vec<CellResult>, ExperimentError>> =
        cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect();
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }
    let mut cells = Vec::new();
    for loss in [LossArm::Ce, LossArm::CeFl] {
        for formatted in [false, true] {
            let rs: Vec<&CellResult> = runs.iter().filter(|r| r.loss == loss && r.formatted == formatted).collect();
            let med = |f: &dyn Fn(&CellResult) -> f64| median(&mut rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            cells.push(CellSummary {
                loss,
                formatted,
                median_f1: med(&|r| r.micro_f1),
                median_fe: med(&|r| r.fe.total() as f64),
                median_fe_length: med(&|r| r.fe.length as f64),
                median_fe_source: med(&|r| r.fe.source as f64),
                median_fe_tagset: med(&|r| r.fe.tagset as f64),
                max_fe_length: rs.iter().map(|r| r.fe.length).max().unwrap_or(0),
                max_fe_source: rs.iter().map(|r| r.fe.source).max().unwrap_or(0),
            });
        }
    }
    Ok(AblationReport {
        config: cfg.clone(),
        cells,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn tiny_ablation_runs() {
        let cfg = AblationConfig {
            n_train: 20,
            n_test: 10,
            seeds: vec![1, 2],
            epochs: 1,
            ..AblationConfig::default()
        };
        let report = run_ablation(&cfg).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert_eq!(report.runs.len(), 8);
        for c in report.cells.iter().filter(|c| c.formatted) {
            assert_eq!(c.max_fe_length + c.max_fe_source, 0);
        }
        assert_eq!(report.table().lines().count(), 5);
    }
}
