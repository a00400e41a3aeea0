use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use osar_core::aarn::{self, train_aarn, AarnArch, AarnModel, AarnTrainConfig};
use osar_core::idsn::{extract_artifact_pattern, synthesize_pairs};
use osar_core::image_io::{slice_patches, Patch};
use osar_core::synthetic::PhantomSpec;
use osar_core::tensor::kernels::{conv2d_backward, conv2d_forward};
use osar_core::{Rng, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    // a 30-sample chunk through the widest autoencoder layer
    let x = random(&[30, 32, 32, 32], &mut rng);
    let k = random(&[32, 32, 3, 3], &mut rng);
    let b = random(&[32], &mut rng);
    let y = conv2d_forward(&x, &k, &b, 1, 1).unwrap();
    let dy = random(y.shape(), &mut rng);
    let mut group = c.benchmark_group("conv3x3_32ch_32px_b30");
    group.sample_size(10);
    group.bench_function("forward", |bench| {
        bench.iter(|| conv2d_forward(black_box(&x), &k, &b, 1, 1).unwrap())
    });
    group.bench_function("backward", |bench| {
        bench.iter(|| conv2d_backward(black_box(&x), &k, &b, 1, 1, dy.data(), true).unwrap())
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let phantom = PhantomSpec::default().build();
    let norm = phantom.noisy.normalize().unwrap();
    let pool = slice_patches(&norm, 16).unwrap();
    let source = Patch::from_image(&norm, 4, 4).unwrap();
    let patterns = vec![extract_artifact_pattern(&source)];
    let pairs = synthesize_pairs(&patterns, &pool, 30, 0.1, 3).unwrap();
    let config = AarnTrainConfig {
        batch_size: 30,
        max_epochs: 1,
        ..AarnTrainConfig::default()
    };
    let mut group = c.benchmark_group("aarn");
    group.sample_size(10);
    group.bench_function("train_step_batch30", |bench| {
        let mut model = AarnModel::<f32>::new(AarnArch::default(), &mut Rng::new(2)).unwrap();
        let mut rng = Rng::new(3);
        bench.iter(|| train_aarn(&mut model, &pairs, &config, &mut rng, |_, _| {}).unwrap())
    });
    let model = AarnModel::<f32>::new(AarnArch::default(), &mut Rng::new(2)).unwrap();
    group.bench_function("infer_256x256", |bench| {
        bench.iter(|| aarn::infer(&model, black_box(&norm), true).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, training);
criterion_main!(benches);
