//! Sequential vs rayon execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qenet::exec::{with_mode, Mode};
use qenet::nn::{Conv2d, LayerSpec};
use qenet::pipeline::{enhance_clip, ModelConfig, Models};
use qenet::{Frame, Tensor, Variant};

fn modes() -> [(&'static str, Mode); 2] {
    [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::<f32>::new(LayerSpec::conv(32, 32, 3, 1), &mut rng).unwrap();
    let x = Tensor::uniform(32, 96, 96, -1.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("conv3x3_32ch_96px");
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| with_mode(mode, || layer.forward(&x).unwrap())));
    }
    group.finish();
}

fn clip(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models = Models::<f32>::new(ModelConfig::reduced(16, 8), &mut rng).unwrap();
    let frames: Vec<Frame> = (0..4).map(|t| Frame::new(Tensor::uniform(3, 64, 64, 0.0, 1.0, &mut rng), t, Variant::Decoded)).collect();
    let mut group = c.benchmark_group("enhance_clip_4x64px");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| with_mode(mode, || enhance_clip(&frames, &models).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, conv, clip);
criterion_main!(benches);
