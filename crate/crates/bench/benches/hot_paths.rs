use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use prdl::augment::{AugmentConfig, Augmenter, Prompt, ToyImage, ViewKind, NUM_OPERATORS};
use prdl::autodiff::{Graph, Tensor};
use prdl::mil::{attention_pool, MilModel};
use prdl::prs::{sample_bag, BagRecord, PrsStore, SigmaMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn autodiff(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, 64, 192);
    let w1 = random(&mut rng, 192, 128);
    let w2 = random(&mut rng, 128, 32);
    c.bench_function("mlp forward+backward 64x192x128x32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let a = g.param(w1.clone());
            let bw = g.param(w2.clone());
            let h = g.matmul(xv, a).unwrap();
            let h = g.relu(h).unwrap();
            let o = g.matmul(h, bw).unwrap();
            let o = g.softmax(o).unwrap();
            let loss = g.mean(o).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn augmentation(c: &mut Criterion) {
    let aug = Augmenter::new(AugmentConfig::default());
    let img = ToyImage::from_fn(32, 32, |x, y| {
        let v = ((x * 7 + y * 3) % 16) as f64 / 16.0;
        [v, 1.0 - v, 0.5]
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("compose global view, all operators", |b| {
        b.iter(|| black_box(aug.compose_view(&img, Prompt::all(), ViewKind::Global, &mut rng).unwrap()))
    });
}

fn mil(c: &mut Criterion) {
    let (dim, n) = (32, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = (0..NUM_OPERATORS * dim).map(|_| rng.random_range(0.1f32..0.9)).collect();
    let bag = BagRecord {
        id: "bag".into(),
        label: 0,
        mu: (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        sigma: (0..n * dim).map(|_| rng.random_range(0.1f32..2.0)).collect(),
    };
    let store = PrsStore::new(dim, mask, vec![bag]).unwrap();
    c.bench_function("sample_bag 64 patches, D=32", |b| {
        b.iter(|| black_box(sample_bag(&store, "bag", Prompt::all(), SigmaMode::Prompted, &mut rng).unwrap()))
    });
    let model = MilModel::init(dim, 16, 3, &mut rng);
    let z = random(&mut rng, n, dim);
    c.bench_function("attention_pool 64 patches, D=32", |b| {
        b.iter(|| black_box(attention_pool(&model, &z).unwrap()))
    });
}

criterion_group!(benches, autodiff, augmentation, mil);
criterion_main!(benches);
