use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mvcc_bench::{prob_rows, random_tensor};
use mvcc_core::augment::{make_view_pair, AugmentConfig};
use mvcc_core::data::{generate_dataset, DataConfig};
use mvcc_core::geometry::{grid_sample, make_grid, AffineTransform};
use mvcc_core::losses::{self, CorrelationBatch};
use mvcc_core::model::{pseudo_label, SegNet, SegNetConfig};
use mvcc_core::sampler::{sample_pixels, SampleSpec};
use mvcc_core::trainer::{stream_rng, train_step, Nets, StepBatch, TrainConfig, Variant};
use mvcc_core::Graph;

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[8, 48, 48], 1);
    let w = random_tensor(&[8, 8, 3, 3], 2);
    let b = random_tensor(&[8], 3);
    c.bench_function("conv2d 8x48x48 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xi, wi, bi) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let y = g.conv2d(xi, wi, bi).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(wi));
        })
    });
}

fn correlation(c: &mut Criterion) {
    let n = 256;
    let (f, fp, t) = (prob_rows(n, 4, 4), prob_rows(n, 4, 5), prob_rows(n, 4, 6));
    let classes: Vec<usize> = (0..n).map(|i| i % 4).collect();
    c.bench_function("correlation_consistency N=256 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let target = g.constant(t.clone());
            let batch = CorrelationBatch {
                f: g.param(f.clone()),
                f_prime: g.param(fp.clone()),
                target,
                target_prime: target,
                indices: Vec::new(),
            };
            let l = losses::correlation_consistency(&mut g, &batch).unwrap();
            g.backward(l).unwrap();
            black_box(g.value(l).item())
        })
    });
    c.bench_function("info_nce N=256 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let id = g.param(f.clone());
            let l = losses::info_nce(&mut g, id, &classes, 0.1).unwrap();
            g.backward(l).unwrap();
            black_box(g.value(l).item())
        })
    });
}

fn geometry(c: &mut Criterion) {
    let img = random_tensor(&[3, 48, 48], 7);
    let t = AffineTransform::scale(1.07, 1.07).unwrap().compose(&AffineTransform::translation(0.05, -0.08));
    c.bench_function("grid_sample 3x48x48", |bench| {
        bench.iter(|| black_box(grid_sample(&img, &make_grid(&t, 48, 48)).unwrap()))
    });
}

fn sampling(c: &mut Criterion) {
    let m = 4 * 48 * 48;
    let hard: Vec<usize> = (0..m).map(|i| if i % 10 == 0 { 1 } else { 0 }).collect();
    let eligible = vec![true; m];
    let spec = SampleSpec::category_normalized(&hard, &eligible, 4, 256).unwrap();
    let mut rng = stream_rng(0, 0);
    c.bench_function("sample_pixels N=256 over 4x48x48", |bench| {
        bench.iter(|| black_box(sample_pixels(&spec, &mut rng).unwrap()))
    });
}

fn pipeline(c: &mut Criterion) {
    let data = generate_dataset(&DataConfig::default(), 8, 0).unwrap();
    let net = SegNet::init(SegNetConfig::default(), &mut stream_rng(0, 0)).unwrap();
    let mut rng = stream_rng(0, 1);
    let pair = make_view_pair(&data.images[0], &mut rng, &AugmentConfig::default()).unwrap();
    c.bench_function("pseudo_label 48x48", |bench| bench.iter(|| black_box(pseudo_label(&net, &pair).unwrap())));

    for variant in [Variant::SupervisedOnly, Variant::Full, Variant::Nce] {
        let cfg = TrainConfig {
            variant,
            ..TrainConfig::default()
        };
        let batch = StepBatch {
            labeled: (0..4).map(|k| (&data.images[k], data.labels[k].as_slice())).collect(),
            unlabeled: (4..8).map(|k| &data.images[k]).collect(),
        };
        let nets = Nets::new(net.clone(), cfg.ema).unwrap();
        c.bench_function(&format!("train_step {variant} 4+4 images"), |bench| {
            bench.iter_batched(
                || (nets.clone(), stream_rng(0, 1), stream_rng(0, 2)),
                |(mut n, mut r1, mut r2)| black_box(train_step(&cfg, &mut n, &batch, 0.05, &mut r1, &mut r2).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, correlation, geometry, sampling, pipeline
}
criterion_main!(benches);
