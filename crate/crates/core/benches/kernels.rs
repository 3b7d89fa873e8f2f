//! Data-parallel kernels on the default thread pool against a single-thread
//! pool. Build with `--no-default-features` for the fully sequential code path.

use std::hint::black_box;

#[cfg(feature = "parallel")]
use criterion::BenchmarkId;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gfss_lidar::config::ToolConfig;
use gfss_lidar::geometry::{project, Point, PointCloud, ProjectionConfig};
use gfss_lidar::protocol::{confusion, train_base, Dataset, Split};
use gfss_lidar::synth::{generate_corpus, generate_scene, street_scene, Sensor};

fn kitti_like_cloud(n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    PointCloud::new(
        (0..n)
            .map(|_| {
                let r: f32 = rng.random_range(2.0..80.0);
                let az: f32 = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
                let el: f32 = rng.random_range(-0.43..0.05);
                Point::new(
                    r * el.cos() * az.cos(),
                    r * el.cos() * az.sin(),
                    r * el.sin(),
                    rng.random(),
                )
            })
            .collect(),
    )
}

/// Runs `f` under each available threading mode.
fn modes(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        g.bench_function(
            BenchmarkId::new("rayon-pool", rayon::current_num_threads()),
            |b| b.iter(&f),
        );
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("pool");
        g.bench_function(BenchmarkId::new("single-thread", 1), |b| {
            b.iter(|| single.install(&f))
        });
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&f));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let cloud = kitti_like_cloud(120_000);
    let proj = ProjectionConfig::from_degrees(2048, 64, 3.0, 25.0).expect("projection");
    modes(c, "project_120k", || {
        black_box(project(&cloud, &proj).expect("projects"));
    });

    let cfg = ToolConfig::synthetic();
    let classes = cfg.corpus_config().expect("synth").classes;
    let spec = street_scene(9, &classes, &Sensor::default());
    modes(c, "raycast_scene", || {
        black_box(generate_scene(&spec).expect("scene"));
    });

    let tax = cfg.taxonomy().expect("taxonomy");
    let mut corpus_cfg = cfg.corpus_config().expect("synth");
    corpus_cfg.base_frames = 8;
    corpus_cfg.eval_frames = 8;
    let corpus = generate_corpus(&corpus_cfg).expect("corpus");
    let base = Dataset::new(corpus.base_train, Split::Train);
    let eval = Dataset::new(corpus.eval, Split::Val);
    let mut train = cfg.train_config().expect("train config");
    train.base.epochs = 1;
    train.base.batch_size = 8;
    modes(c, "base_epoch_8_frames", || {
        black_box(train_base(&base, &tax, &train).expect("trains"));
    });

    let (model, _) = train_base(&base, &tax, &train).expect("trains");
    modes(c, "confusion_8_frames", || {
        black_box(confusion(&model, &eval, &tax, &train.projection).expect("evaluates"));
    });
}

criterion_group!(kernels, benches);
criterion_main!(kernels);
