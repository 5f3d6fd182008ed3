use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use slotforge::data::{
    build_vocab, gen_synthetic as generate, load_jsonl, load_predictions, save_jsonl, save_predictions, spec_for, Example,
    Prediction, SyntheticConfig, TaskShape,
};
use slotforge::decoder::{batch_decode, DecodeConfig};
use slotforge::eval::{joint_accuracy, micro_f1, parse_output, FeCounts, Tuple};
use slotforge::experiment::{run_ablation as run_grid, AblationConfig};
use slotforge::format::{builtin_format, FormatSpec, SlotKind};
use slotforge::losses::LossWeights;
use slotforge::mask::MaskTable;
use slotforge::toylm::{EpochMetrics, PreparedExample, ToyLm, TrainConfig};
use slotforge::vocab::{TokenSeq, Vocabulary};

use crate::{AblationArgs, CompileArgs, DecodeArgs, FormatArgs, GenArgs, Metric, ScoreArgs, Shape, TrainArgs, WeightArgs};

/// An error with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub source: anyhow::Error,
}

const USAGE: u8 = 2;
const RUNTIME: u8 = 1;

trait OrExit<T> {
    /// Bad flags, unreadable or malformed inputs: exit code 2.
    fn config(self) -> Result<T, Failure>;
    /// Failures after the inputs were accepted: exit code 1.
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: USAGE,
            source: e.into(),
        })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: RUNTIME,
            source: e.into(),
        })
    }
}

fn usage(e: anyhow::Error) -> Failure {
    Failure { code: USAGE, source: e }
}

fn read_tags(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading tags {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// The format chosen on the command line, bound to `--tags` if given.
/// `None` means "the builtin format of each example's task".
fn template(args: &FormatArgs) -> anyhow::Result<Option<FormatSpec>> {
    let spec = match (&args.format, &args.task) {
        (Some(f), _) => FormatSpec::parse(f).context("parsing --format")?,
        (None, Some(t)) => builtin_format(t)?,
        (None, None) => {
            if args.tags.is_some() {
                bail!("--tags needs --format or --task");
            }
            return Ok(None);
        }
    };
    match &args.tags {
        Some(path) => Ok(Some(spec.bind_tagset(&read_tags(path)?)?)),
        None => Ok(Some(spec)),
    }
}

/// The bound format of one example.
fn example_spec(template: Option<&FormatSpec>, ex: &Example) -> anyhow::Result<FormatSpec> {
    let base = match template {
        Some(t) => t.clone(),
        None => builtin_format(&ex.task).with_context(|| format!("example {}", ex.id))?,
    };
    spec_for(&base, ex).with_context(|| format!("binding the tagset of example {}", ex.id))
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime(),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn kind_name(kind: SlotKind) -> &'static str {
    match kind {
        SlotKind::Any => "any",
        SlotKind::Source => "source",
        SlotKind::Choice => "choice",
    }
}

pub fn compile_format(args: CompileArgs) -> Result<(), Failure> {
    let spec = template(&args.format)
        .config()?
        .ok_or_else(|| usage(anyhow!("one of --format or --task is required")))?;
    if args.render_only {
        return emit(args.out.as_ref(), &format!("{}\n", spec.render()));
    }
    let vocab_path = args.vocab.as_ref().expect("clap enforces --vocab");
    let vocab = Vocabulary::load(vocab_path)
        .with_context(|| format!("loading {}", vocab_path.display()))
        .config()?;
    let source = vocab.encode(args.source.as_deref().expect("clap enforces --source"));
    let table = MaskTable::compile(&spec, &vocab, &source)
        .context("compiling masks (bind a tagset with --tags)")
        .config()?;
    let mut text = format!("format\t{}\n", spec.render());
    for (i, slot) in spec.slots().iter().enumerate() {
        let _ = writeln!(
            text,
            "slot {i}\t{}\t{}\t{} tokens",
            kind_name(slot.kind()),
            slot.render(),
            table.content_mask(i).count()
        );
    }
    let _ = writeln!(text, "vocab\t{}", vocab.tokens().join(" "));
    text.push_str(&table.dump());
    emit(args.out.as_ref(), &text)
}

#[derive(Debug, Serialize)]
struct FormatErrorReport {
    #[serde(flatten)]
    fe_counts: FeCounts,
    n_examples: usize,
}

fn load_examples(path: &Path) -> Result<Vec<Example>, Failure> {
    load_jsonl(path).with_context(|| format!("loading {}", path.display())).config()
}

pub fn score(args: ScoreArgs, validate_only: bool) -> Result<(), Failure> {
    let template = template(&args.format).config()?;
    let data = load_examples(&args.data)?;
    let preds = load_predictions(&args.preds)
        .with_context(|| format!("loading {}", args.preds.display()))
        .config()?;
    let known: BTreeSet<&str> = data.iter().map(|e| e.id.as_str()).collect();
    let mut outputs: HashMap<&str, &str> = HashMap::new();
    for p in &preds {
        if !known.contains(p.id.as_str()) {
            return Err(usage(anyhow!("prediction id {:?} is not in {}", p.id, args.data.display())));
        }
        if outputs.insert(&p.id, &p.output).is_some() {
            return Err(usage(anyhow!("duplicate prediction id {:?}", p.id)));
        }
    }
    let mut fe = FeCounts::default();
    let mut pred_sets: Vec<BTreeSet<Tuple>> = Vec::with_capacity(data.len());
    let mut gold_sets: Vec<BTreeSet<Tuple>> = Vec::with_capacity(data.len());
    for ex in &data {
        let spec = example_spec(template.as_ref(), ex).config()?;
        // A missing prediction is an empty output.
        let parsed = parse_output(outputs.get(ex.id.as_str()).copied().unwrap_or(""), &spec, &ex.input);
        fe += parsed.fe_counts();
        pred_sets.push(parsed.clean_tuples());
        gold_sets.push(parse_output(&ex.target, &spec, &ex.input).clean_tuples());
    }
    let (json, summary) = if validate_only {
        let report = FormatErrorReport {
            fe_counts: fe,
            n_examples: data.len(),
        };
        (serde_json::to_string(&report).expect("serializable"), String::new())
    } else {
        let mut report = micro_f1(&pred_sets, &gold_sets).runtime()?.with_format_errors(fe);
        if args.metric == Metric::Joint {
            report.joint_accuracy = Some(joint_accuracy(&pred_sets, &gold_sets).runtime()?);
        }
        let summary = format!(
            "precision {:.4}  recall {:.4}  micro-F1 {:.4}{}\n",
            report.precision,
            report.recall,
            report.micro_f1,
            report.joint_accuracy.map_or(String::new(), |j| format!("  joint {j:.4}"))
        );
        (report.to_json(), summary)
    };
    if args.pretty {
        eprintln!(
            "{summary}format errors: length {}  source {}  tagset {}  over {} examples",
            fe.length,
            fe.source,
            fe.tagset,
            data.len()
        );
    }
    emit(args.out.as_ref(), &format!("{json}\n"))
}

fn weights(w: &WeightArgs) -> Result<LossWeights, Failure> {
    let lw = LossWeights {
        ce: w.w_ce,
        st: w.w_st,
        sl: w.w_sl,
        miss: w.w_miss,
    };
    if [lw.ce, lw.st, lw.sl, lw.miss].iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(usage(anyhow!("loss weights must be finite and non-negative")));
    }
    Ok(lw)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn train_toy(args: TrainArgs) -> Result<(), Failure> {
    let w = weights(&args.weights)?;
    if !(args.lr.is_finite() && args.lr >= 0.0) {
        return Err(usage(anyhow!("--lr must be finite and non-negative")));
    }
    let template = template(&args.format).config()?;
    let data = load_examples(&args.data)?;
    let mut all = data.clone();
    for extra in &args.vocab_data {
        all.extend(load_examples(extra)?);
    }
    let vocab = build_vocab(&all);
    let mut prepared = Vec::with_capacity(data.len());
    let mut slot_counts = BTreeSet::new();
    for ex in &data {
        let spec = example_spec(template.as_ref(), ex).config()?;
        slot_counts.insert(spec.slot_count());
        match PreparedExample::new(ex, &spec, &vocab) {
            Ok(p) => prepared.push(p),
            Err(e) => log::warn!("dropping training example: {e}"),
        }
    }
    if slot_counts.len() > 1 {
        return Err(usage(anyhow!("examples mix formats with {slot_counts:?} slots")));
    }
    if prepared.is_empty() {
        return Err(usage(anyhow!("no training example matches its format")));
    }
    let slot_count = *slot_counts.first().expect("non-empty data");
    let mut model = ToyLm::for_format(&vocab, slot_count, args.init_scale, args.seed);
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        weights: w,
        seed: args.seed,
    };
    let history = model.train(&prepared, &cfg).runtime()?;
    model.save(&args.out).runtime()?;
    let vocab_out = args.vocab_out.unwrap_or_else(|| sibling(&args.out, ".vocab"));
    vocab.save(&vocab_out).runtime()?;
    let metrics_out = args.metrics.unwrap_or_else(|| sibling(&args.out, ".csv"));
    let mut csv = format!("{}\n", EpochMetrics::CSV_HEADER);
    for m in &history {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    fs::write(&metrics_out, csv).runtime()?;
    let last = history.last().expect("initial metrics are recorded");
    println!("{}", serde_json::to_string(last).expect("serializable"));
    Ok(())
}

pub fn decode(args: DecodeArgs) -> Result<(), Failure> {
    if args.max_len == 0 {
        return Err(usage(anyhow!("--max-len must be positive")));
    }
    let template = template(&args.format).config()?;
    let model = ToyLm::load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))
        .config()?;
    let vocab_path = args.vocab.unwrap_or_else(|| sibling(&args.model, ".vocab"));
    let vocab = Vocabulary::load(&vocab_path)
        .with_context(|| format!("loading {}", vocab_path.display()))
        .config()?;
    if model.vocab_size() != vocab.len() {
        return Err(usage(anyhow!(
            "model has {} tokens, vocabulary {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let data = load_examples(&args.data)?;
    let mut tables = Vec::with_capacity(data.len());
    let mut sources: Vec<TokenSeq> = Vec::with_capacity(data.len());
    for ex in &data {
        let spec = example_spec(template.as_ref(), ex).config()?;
        if spec.slot_count() + 1 != model.state_count() {
            return Err(usage(anyhow!(
                "example {} has {} slots, the model was trained for {}",
                ex.id,
                spec.slot_count(),
                model.state_count() - 1
            )));
        }
        let source = vocab.encode(&ex.input);
        tables.push(MaskTable::compile(&spec, &vocab, &source).config()?);
        sources.push(source);
    }
    let cfg = DecodeConfig {
        max_len: args.max_len,
        formatted: args.formatted,
        ..DecodeConfig::default()
    };
    let outputs = batch_decode(&model, &tables, &cfg, &sources).runtime()?;
    let mut preds = Vec::with_capacity(data.len());
    for (ex, out) in data.iter().zip(outputs) {
        let out = out.with_context(|| format!("decoding {}", ex.id)).runtime()?;
        let output = vocab.decode(out.scored_tokens(&vocab.specials())).runtime()?;
        preds.push(Prediction {
            id: ex.id.clone(),
            output,
        });
    }
    save_predictions(&preds, &args.out).runtime()
}

fn shape(s: Shape) -> TaskShape {
    match s {
        Shape::Ner => TaskShape::NerLike,
        Shape::Re => TaskShape::ReLike,
        Shape::Id => TaskShape::IdLike,
    }
}

pub fn gen_synthetic(args: GenArgs) -> Result<(), Failure> {
    let cfg = SyntheticConfig {
        n_examples: args.n,
        vocab_size: args.vocab_size,
        max_source_len: args.max_source_len,
        n_tags: args.n_tags,
        task_shape: shape(args.shape),
        seed: args.seed,
    };
    let examples = generate(&cfg).config()?;
    save_jsonl(&examples, &args.out).runtime()
}

pub fn run_ablation(args: AblationArgs) -> Result<(), Failure> {
    if args.seeds == 0 || args.n_train == 0 || args.n_test == 0 {
        return Err(usage(anyhow!("--seeds, --n-train and --n-test must be positive")));
    }
    let cfg = AblationConfig {
        shape: shape(args.shape),
        n_train: args.n_train,
        n_test: args.n_test,
        seeds: (args.seed..args.seed + args.seeds).collect(),
        epochs: args.epochs,
        lr: args.lr,
        init_scale: args.init_scale,
        max_len: args.max_len,
        fl_weights: weights(&args.weights)?,
        ..AblationConfig::default()
    };
    let report = run_grid(&cfg).runtime()?;
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("serializable");
        fs::write(path, json + "\n").runtime()?;
    }
    if args.pretty {
        print!("{}", report.table());
    } else {
        let cells: BTreeMap<String, _> = report
            .cells
            .iter()
            .map(|c| (format!("{}{}", c.loss.label(), if c.formatted { "+FD" } else { "" }), c))
            .collect();
        println!("{}", serde_json::to_string(&cells).expect("serializable"));
    }
    Ok(())
}
