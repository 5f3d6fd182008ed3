mod common;

use slotforge::data::{
    build_vocab, filter_violations, gen_synthetic, load_jsonl, load_predictions, save_jsonl, save_predictions,
    synthetic_format, Prediction, SyntheticConfig, TaskShape,
};
use slotforge::decoder::{batch_decode, DecodeConfig};
use slotforge::experiment::{median, score_model};
use slotforge::losses::LossWeights;
use slotforge::toylm::{prepare, ToyLm, TrainConfig};
use slotforge::vocab::{TokenSeq, Vocabulary};

#[test]
fn training_lowers_the_combined_loss_across_seeds() {
    for shape in [TaskShape::NerLike, TaskShape::ReLike, TaskShape::IdLike] {
        let mut initial = Vec::new();
        let mut last = Vec::new();
        for seed in 0..5 {
            let data = gen_synthetic(&SyntheticConfig::new(shape, 120, seed)).unwrap();
            let vocab = build_vocab(&data);
            let template = synthetic_format(shape);
            let prepared = prepare(&data, &template, &vocab).unwrap();
            let mut model = ToyLm::for_format(&vocab, template.slot_count(), 0.1, seed);
            let cfg = TrainConfig {
                epochs: 2,
                lr: 0.3,
                weights: LossWeights::DEFAULT,
                seed,
                ..TrainConfig::default()
            };
            let metrics = model.train(&prepared, &cfg).unwrap();
            initial.push(metrics[0].combined);
            last.push(metrics.last().unwrap().combined);
        }
        let (a, b) = (median(&mut initial), median(&mut last));
        assert!(b < a, "{shape:?}: median combined loss {a} -> {b}");
    }
}

#[test]
fn data_train_decode_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let shape = TaskShape::NerLike;
    let train = gen_synthetic(&SyntheticConfig::new(shape, 500, 1)).unwrap();
    let test = gen_synthetic(&SyntheticConfig::new(shape, 60, 2)).unwrap();
    save_jsonl(&test, dir.path().join("test.jsonl")).unwrap();
    let test = load_jsonl(dir.path().join("test.jsonl")).unwrap();

    let all: Vec<_> = train.iter().chain(&test).cloned().collect();
    let vocab = build_vocab(&all);
    vocab.save(dir.path().join("model.vocab")).unwrap();
    let template = synthetic_format(shape);
    let (train, dropped) = filter_violations(&train, &template, &vocab);
    assert!(dropped.is_empty());
    let mut model = ToyLm::for_format(&vocab, template.slot_count(), 0.0, 0);
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.3,
        ..TrainConfig::default()
    };
    model.train(&prepare(&train, &template, &vocab).unwrap(), &cfg).unwrap();
    model.save(dir.path().join("model.bin")).unwrap();

    let model = ToyLm::load(dir.path().join("model.bin")).unwrap();
    let vocab = Vocabulary::load(dir.path().join("model.vocab")).unwrap();
    let prepared = prepare(&test, &template, &vocab).unwrap();
    let tables: Vec<_> = prepared.iter().map(|p| p.table.clone()).collect();
    let sources: Vec<TokenSeq> = prepared.iter().map(|p| p.source.clone()).collect();
    let outputs = batch_decode(&model, &tables, &DecodeConfig::formatted(true), &sources).unwrap();
    let preds: Vec<Prediction> = test
        .iter()
        .zip(outputs)
        .map(|(ex, out)| Prediction {
            id: ex.id.clone(),
            output: vocab.decode(out.unwrap().scored_tokens(&vocab.specials())).unwrap(),
        })
        .collect();
    save_predictions(&preds, dir.path().join("preds.jsonl")).unwrap();
    assert_eq!(load_predictions(dir.path().join("preds.jsonl")).unwrap(), preds);

    let (f1, fe) = score_model(&model, &test, &prepared, &template, &vocab, &DecodeConfig::formatted(true)).unwrap();
    assert_eq!((fe.length, fe.source), (0, 0));
    assert!(f1 > 0.5, "formatted F1 {f1}");
}
