use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xivector::data::synth::{gen_synthetic_corpus, SynthConfig};
use xivector::eval::{all_pairs_trials, embed_all, score_trials};
use xivector::model::{ModelConfig, ModelParams};
use xivector::train::{batch_gradient, Example};
use xivector::{Exec, Pooling};

fn corpus() -> xivector::data::Corpus {
    gen_synthetic_corpus(&SynthConfig {
        num_speakers: 8,
        segments_per_speaker: 4,
        frames: 30,
        latent_dim: 8,
        obs_dim: 12,
        seed: 1,
        ..SynthConfig::default()
    }
    .with_prior(0.0, 0.0))
    .expect("valid synth config")
}

fn minibatch_gradient(c: &mut Criterion) {
    let corpus = corpus();
    let params = ModelParams::init(ModelConfig::desk(12, 32, 16, 32, 8, Pooling::XIVECTOR).unwrap(), 0);
    let batch: Vec<Example> = corpus.sequences[..16]
        .iter()
        .map(|s| Example {
            features: s.features.clone(),
            label: s.speaker.unwrap(),
        })
        .collect();
    let mut group = c.benchmark_group("minibatch_gradient");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| batch_gradient(black_box(&params), &batch, exec).unwrap())
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let corpus = corpus();
    let params = ModelParams::init(ModelConfig::desk(12, 32, 16, 32, 8, Pooling::XIVECTOR).unwrap(), 0);
    let trials = all_pairs_trials(&corpus).unwrap();
    let mut group = c.benchmark_group("embed_and_score");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                let emb = embed_all(&params, &corpus.sequences, exec).unwrap();
                score_trials(black_box(&trials), &emb, exec).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, minibatch_gradient, scoring);
criterion_main!(benches);
