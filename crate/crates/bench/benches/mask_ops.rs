//! Mask-algebra benchmarks: the operations behind per-episode scoring.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vise_core::maskcore::{BinaryMask, BoundingBox};

fn random_mask(rng: &mut ChaCha8Rng, side: u32, density: f64) -> BinaryMask {
    let mut mask = BinaryMask::empty(side, side).unwrap();
    for y in 0..side {
        for x in 0..side {
            if rng.random::<f64>() < density {
                mask.set(x, y, true).unwrap();
            }
        }
    }
    mask
}

fn bench_iou(c: &mut Criterion) {
    let mut group = c.benchmark_group("iou");
    for side in [128u32, 512] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mask(&mut rng, side, 0.5);
        let b = random_mask(&mut rng, side, 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |bench, _| {
            bench.iter(|| a.iou(&b).unwrap())
        });
    }
    group.finish();
}

fn bench_union(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_mask(&mut rng, 512, 0.4);
    let b = random_mask(&mut rng, 512, 0.4);
    c.bench_function("union_512", |bench| bench.iter(|| a.union(&b).unwrap()));
}

fn bench_rle_roundtrip(c: &mut Criterion) {
    let mut group = c.benchmark_group("rle_roundtrip");
    for side in [128u32, 512] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = random_mask(&mut rng, side, 0.3);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |bench, _| {
            bench.iter(|| {
                let rle = mask.to_rle();
                rle.to_mask().unwrap()
            })
        });
    }
    group.finish();
}

fn bench_box_fill(c: &mut Criterion) {
    let bbox = BoundingBox::new(37, 59, 411, 467).unwrap();
    c.bench_function("mask_from_box_512", |bench| {
        bench.iter(|| BinaryMask::from_box(bbox, 512, 512).unwrap())
    });
}

criterion_group!(benches, bench_iou, bench_union, bench_rle_roundtrip, bench_box_fill);
criterion_main!(benches);
