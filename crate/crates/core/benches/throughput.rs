use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omnidet::data::{generate_synthetic, Pools};
use omnidet::evaluation::{evaluate, ImageEval};
use omnidet::trainer::Trainer;
use omnidet::{BoxF, Config, Detection, Exec, GroundTruthBox};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn batch_gradient(c: &mut Criterion) {
    let d = generate_synthetic(1, 40, 128, 3, "bench", Exec::Parallel)
        .unwrap()
        .partition([0.4, 0.3, 0.3], 1)
        .unwrap();
    let pools = Pools::from_manifest(&d.manifest);
    let cfg = Config {
        channels: 16,
        ..Config::default()
    };
    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for (name, exec) in MODES {
        let t = Trainer::new(cfg.clone(), exec).unwrap();
        let batch = t.make_batch(&d, &pools).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| t.batch_gradient(&batch).unwrap()));
    }
    g.finish();
}

fn eval_instance() -> Vec<ImageEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..300)
        .map(|i| {
            let mut rand_box = || {
                let (w, h) = (rng.random_range(8.0..60.0), rng.random_range(8.0..60.0));
                let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                (BoxF::new(x, y, x + w, y + h), rng.random_range(0..3usize), rng.random_range(0.0..1.0))
            };
            let ground_truth = (0..3).map(|_| rand_box()).map(|(b, c, _)| GroundTruthBox::new(b, c)).collect();
            let detections = (0..40)
                .map(|_| rand_box())
                .map(|(bbox, class_id, score)| Detection { bbox, class_id, score })
                .collect();
            ImageEval {
                image_id: format!("{i:04}"),
                detections,
                ground_truth,
            }
        })
        .collect()
}

fn evaluation(c: &mut Criterion) {
    let images = eval_instance();
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(&images, 3, exec).unwrap()));
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_synthetic");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_synthetic(3, 64, 128, 3, "bench", exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().without_plots();
    targets = batch_gradient, evaluation, synthesis
}
criterion_main!(benches);
