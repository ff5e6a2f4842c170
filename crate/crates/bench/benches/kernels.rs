use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vac_core::attack::{pgd, AttackConfig};
use vac_core::data::synthetic_blobs;
use vac_core::nn::{Conv2d, Layer, ParamSet};
use vac_core::vae::{objective, NoiseDraws};
use vac_core::{ArchConfig, Pooling, Reduction, Tensor, TrainConfig, VacModel};

fn images(b: usize, c: usize, side: usize) -> Tensor {
    let data = (0..b * c * side * side).map(|i| ((i * 7919) % 255) as f64 / 255.0).collect();
    Tensor::new(vec![b, c, side, side], data).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut params = ParamSet::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let layer = Layer::Conv2d(Conv2d::new(&mut params, "encoder.conv", 16, 32, 3, 2, 1, &mut r).unwrap());
    let x = images(32, 16, 28);
    c.bench_function("conv2d 16->32 stride 2, 32x16x28x28 forward", |b| {
        b.iter(|| layer.forward(&params, &x).unwrap())
    });
    let (y, cache) = layer.forward(&params, &x).unwrap();
    let g = Tensor::full(y.shape(), 1.0);
    c.bench_function("conv2d 16->32 stride 2, 32x16x28x28 backward", |b| {
        b.iter_batched(
            || params.grad_buffer(),
            |mut grads| layer.backward(&params, &cache, &g, Some(&mut grads)).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn desk_model() -> VacModel {
    VacModel::new(ArchConfig { pooling: Pooling::Flatten, ..ArchConfig::default() }, 0).unwrap()
}

fn step(c: &mut Criterion) {
    let model = desk_model();
    let ds = synthetic_blobs(64, 28, 0.1, 0).unwrap();
    let labels: Vec<usize> = ds.labels.clone();
    let cfg = TrainConfig { beta: 10.0, reduction: Reduction::Mean, ..TrainConfig::default() };
    let noise = NoiseDraws::generate(0, 0, 64, 1, 100);
    let mut group = c.benchmark_group("objective");
    group.sample_size(10);
    group.bench_function("desk model, batch 64, value and gradient", |b| {
        b.iter(|| objective(&model, &ds.images, Some(&labels), &cfg, 1.0, &noise, true).unwrap())
    });
    group.finish();
}

fn attack(c: &mut Criterion) {
    let model = desk_model();
    let ds = synthetic_blobs(8, 28, 0.1, 1).unwrap();
    let cfg = AttackConfig { steps: 10, ..AttackConfig::default() };
    let mut group = c.benchmark_group("pgd");
    group.sample_size(10);
    group.bench_function("desk model, 8 images, 10 steps", |b| {
        b.iter(|| pgd(&ds.images, &ds.labels, &model, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, step, attack);
criterion_main!(benches);
