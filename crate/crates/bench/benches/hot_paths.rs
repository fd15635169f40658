use std::fs;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use labelfusion::encoder::{encode, normalized_features, EncoderParams};
use labelfusion::fusion::{assemble_input, backward, forward, multiclass_loss_grad, FusionParams};
use labelfusion::llm::parse_scores;
use labelfusion::synthetic::{self, COMPLEMENTARY_LABELS};
use labelfusion::{
    fit, AutoFusionConfig, EncoderConfig, EncoderSpec, LabelSchema, ProviderConfig, RunContext, TaskMode,
};

const TEXT: &str = "Shares of the chip maker rallied after the quarterly earnings beat expectations";

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let params = EncoderParams::init(&cfg, 1);
    c.bench_function("featurize", |b| b.iter(|| normalized_features(black_box(TEXT), &cfg)));
    c.bench_function("encode", |b| b.iter(|| encode(black_box(TEXT), &params, &cfg)));
}

fn mlp(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let params = EncoderParams::init(&cfg, 1);
    let emb = encode(TEXT, &params, &cfg);
    let scores = vec![vec![0.1, 0.7, 0.1, 0.1], vec![0.2, 0.5, 0.2, 0.1]];
    let input = assemble_input(&emb, &scores, 4).unwrap();
    let net = FusionParams::init(input.values().len(), &[128], 4, 3);
    c.bench_function("forward", |b| b.iter(|| forward(black_box(&input), &net).unwrap()));
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let (logits, trace) = forward(black_box(&input), &net).unwrap();
            let (_, d) = multiclass_loss_grad(logits.values(), 1).unwrap();
            backward(&trace, &net, &d).unwrap()
        })
    });
}

fn parser(c: &mut Criterion) {
    let schema = LabelSchema::new(COMPLEMENTARY_LABELS).unwrap();
    let clean = r#"{"world": 0.1, "sports": 0.05, "business": 0.8, "tech": 0.3}"#;
    let noisy = "Sure! Here are the scores:\n```json\n{\"world\": 0.1, \"sports\": \"0.05\", \"business\": 0.8}\n```\nLet me know.";
    c.bench_function("parse_scores_clean", |b| {
        b.iter(|| parse_scores(black_box(clean), &schema))
    });
    c.bench_function("parse_scores_noisy", |b| {
        b.iter(|| parse_scores(black_box(noisy), &schema))
    });
}

fn training(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic::complementary(400, 7);
    let table = dir.path().join("mock.tsv");
    fs::write(&table, data.mock_table()).unwrap();
    let train = data.train();
    let mut cfg = AutoFusionConfig::new(&COMPLEMENTARY_LABELS, false, vec![ProviderConfig::mock(&table)]);
    cfg.encoder = EncoderSpec::Hashed(EncoderConfig {
        dim: 64,
        lr_small: 0.05,
        ..EncoderConfig::default()
    });
    cfg.fusion.hidden_sizes = vec![64];
    cfg.fusion.epochs = 1;
    cfg.validation_fraction = 0.0;
    assert_eq!(train.mode(), TaskMode::MultiClass);
    c.bench_function("fit_one_epoch_320_rows", |b| {
        b.iter_batched(
            RunContext::new,
            |ctx| fit(&train, &cfg, &ctx).unwrap(),
            BatchSize::PerIteration,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = encoder, mlp, parser, training
}
criterion_main!(benches);
