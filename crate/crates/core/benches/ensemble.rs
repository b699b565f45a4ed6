use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphere_sde::geometry::UnitVector3;
use sphere_sde::harness::{preset, run_ensemble_with, Execution, OutputKind, RecordTimes, RunOptions};
use sphere_sde::measures::{sample_uniform_sphere, SpherePartition};

fn executions() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    if cfg!(feature = "parallel") {
        v.push(("parallel", Execution::Parallel));
    }
    v
}

fn ensembles(c: &mut Criterion) {
    let cases = [
        ("llg", "desk-noncommuting", 400),
        ("so3", "so3-noncommuting", 400),
        ("geodesic", "desk-geodesic", 2000),
    ];
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    for (label, name, steps) in cases {
        let mut cfg = preset(name).unwrap();
        cfg.n_paths = 1024;
        cfg.n_steps = steps;
        cfg.record_times = RecordTimes::Steps(vec![steps]);
        cfg.outputs = vec![OutputKind::MeanTrajectory];
        group.throughput(Throughput::Elements((cfg.n_paths * steps) as u64));
        for (mode, execution) in executions() {
            let options = RunOptions { execution, threads: None };
            group.bench_with_input(BenchmarkId::new(label, mode), &cfg, |b, cfg| {
                b.iter(|| run_ensemble_with(cfg, options).unwrap())
            });
        }
    }
    group.finish();
}

fn density_binning(c: &mut Criterion) {
    let partition = SpherePartition::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<UnitVector3> = (0..10_000).map(|_| sample_uniform_sphere(&mut rng)).collect();
    let mut group = c.benchmark_group("segment_of");
    group.throughput(Throughput::Elements(points.len() as u64));
    group.bench_function("fast", |b| {
        b.iter(|| points.iter().map(|&p| partition.segment_of(p).0).sum::<usize>())
    });
    group.bench_function("brute", |b| {
        b.iter(|| points.iter().map(|&p| partition.segment_of_brute(p).0).sum::<usize>())
    });
    group.finish();
}

criterion_group!(benches, ensembles, density_binning);
criterion_main!(benches);
