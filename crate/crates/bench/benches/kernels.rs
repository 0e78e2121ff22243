use bsa_core::layer::{attention_forward_padded, ForwardOptions, LayerParams};
use bsa_core::{build_ball_tree, BallTree, BsaConfig, PointCloud, Variant};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(Array2::from_shape_simple_fn((n, 3), || rng.random_range(0.0..1.0))).unwrap()
}

fn setup(n: usize, variant: Variant) -> (BsaConfig, BallTree, LayerParams<f32>, Array2<f32>) {
    let cfg = BsaConfig::desk_default().with_variant(variant);
    let tree = build_ball_tree(&cloud(n, 1), cfg.ball_size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = LayerParams::init(&cfg, &mut rng);
    let mut x = Array2::from_shape_simple_fn((tree.n_padded(), cfg.model_dim), || rng.random_range(-1.0f32..1.0));
    for (mut row, &ok) in x.rows_mut().into_iter().zip(tree.valid_mask()) {
        if !ok {
            row.fill(0.0);
        }
    }
    (cfg, tree, params, x)
}

fn ball_tree(c: &mut Criterion) {
    let mut g = c.benchmark_group("ball_tree");
    for n in [1024usize, 8192] {
        let pts = cloud(n, 0);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &pts, |b, pts| {
            b.iter(|| build_ball_tree(pts, 256).unwrap())
        });
    }
    g.finish();
}

fn attention_layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_layer");
    g.sample_size(10);
    for n in [1024usize, 4096] {
        for variant in Variant::ALL {
            let (cfg, tree, params, x) = setup(n, variant);
            g.bench_function(BenchmarkId::new(variant.name(), n), |b| {
                b.iter(|| attention_forward_padded(x.view(), &tree, &cfg, &params, ForwardOptions::default()).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, ball_tree, attention_layer);
criterion_main!(benches);
