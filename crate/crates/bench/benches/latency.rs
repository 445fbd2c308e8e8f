//! Streaming-step vs whole-sequence latency across the zoo, plus the
//! feature frontend. The interesting number is the ratio between a 49-frame
//! non-streaming pass and a single streaming step of the same model.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use skws_bench::{input_sequence, model_pair, TRAIN_FRAMES};
use skws_core::frontend::{FeatureConfig, FeatureExtractor, TransformKind};
use skws_core::rng::{uniform_tensor, SplitMix64};
use skws_core::runtime::{new_session, run_non_streaming};
use skws_core::zoo::ModelId;

fn bench_models(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_latency");
    group.sample_size(30);
    for model in [
        ModelId::Dnn,
        ModelId::Cnn,
        ModelId::Crnn,
        ModelId::GruNet,
        ModelId::Dscnn,
        ModelId::SvdfNet,
        ModelId::TcResnet,
    ] {
        let (graph, streamed) = model_pair(model, 1);
        let x = input_sequence(&graph, TRAIN_FRAMES, 2);
        group.bench_function(format!("{}_non_stream_pass", model.name()), |b| {
            b.iter(|| black_box(run_non_streaming(&graph, black_box(&x)).unwrap()))
        });

        let frame = x.slice_time(0, 1).unwrap();
        let mut session = new_session(&streamed).unwrap();
        for _ in 0..TRAIN_FRAMES {
            session.step(&frame).unwrap();
        }
        group.bench_function(format!("{}_stream_step", model.name()), |b| {
            b.iter(|| black_box(session.step(black_box(&frame)).unwrap().output))
        });
    }
    group.finish();
}

fn bench_frontend(c: &mut Criterion) {
    let mut group = c.benchmark_group("frontend");
    let mut rng = SplitMix64::new(3);
    let window = uniform_tensor(&mut rng, &[640], -0.5, 0.5);
    for (name, transform) in [("fft", TransformKind::Fft), ("dft", TransformKind::Dft)] {
        let fx = FeatureExtractor::new(FeatureConfig {
            transform,
            ..FeatureConfig::default()
        })
        .unwrap();
        group.bench_function(format!("extract_frame_{name}"), |b| {
            b.iter(|| black_box(fx.extract_frame(black_box(&window)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_models, bench_frontend);
criterion_main!(benches);
