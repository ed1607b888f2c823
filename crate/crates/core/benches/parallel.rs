//! Parallel versus sequential dispatch of independent experiment
//! cells. With the default `parallel` feature, `threads = 0` fans cells
//! out to a worker pool and `threads = 1` forces the sequential path;
//! without the feature both are sequential, so the two series coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use taskdistill_core::data::{generate_task, TaskGenConfig};
use taskdistill_core::harness::{fit_pca, map_cells};
use taskdistill_core::losses::{LossConfig, LossKind};
use taskdistill_core::nn::EncoderSpec;
use taskdistill_core::train::{pretrain_encoder, TrainConfig};

fn dispatch_modes() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", 0)]
}

/// Eight short encoder-pretraining runs, the unit of work the harness
/// schedules when it prepares an experiment.
fn bench_pretrain_cells(c: &mut Criterion) {
    let task_cfg = TaskGenConfig {
        d_in: 8,
        num_superclasses: 2,
        num_classes: 4,
        pretrain_per_class: 24,
        train_per_class: 8,
        val_per_class: 6,
        test_per_class: 6,
        ..TaskGenConfig::default()
    };
    let task = generate_task(&task_cfg, 3).unwrap();
    let spec = EncoderSpec {
        input_dim: 8,
        hidden_widths: vec![16],
        activation: Default::default(),
        output_dim: 8,
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        loss: LossConfig {
            kind: LossKind::TaskOnly,
            ..LossConfig::default()
        },
        augmentation: taskdistill_core::data::AugmentationSpec {
            mixup_alpha: 0.0,
            ..Default::default()
        },
        ..TrainConfig::default()
    };

    let mut group = c.benchmark_group("dispatch/pretrain-cells");
    group.sample_size(10);
    for (name, threads) in dispatch_modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_cells(8, threads, |i| {
                    let mut cfg = train_cfg.clone();
                    cfg.seed = i as u64;
                    pretrain_encoder(&task.pretrain, &spec, &cfg)
                        .unwrap()
                        .checksum()
                })
            })
        });
    }
    group.finish();
}

/// Pure numeric cells: principal-component fits on random matrices.
fn bench_pca_cells(c: &mut Criterion) {
    let mut group = c.benchmark_group("dispatch/pca-cells");
    group.sample_size(20);
    for (name, threads) in dispatch_modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_cells(16, threads, |i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                    let rows: Vec<Vec<f64>> = (0..60)
                        .map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect();
                    fit_pca(&rows, 4).unwrap().explained_variance[0]
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_pretrain_cells, bench_pca_cells);
criterion_main!(benches);
