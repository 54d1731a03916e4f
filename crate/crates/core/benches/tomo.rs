use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedemu::tomo::{
    fbp_with, make_disk_phantom, radon_with, scan_angles, Execution, ReconParams,
};

fn modes() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Execution::Parallel));
    v
}

fn bench_radon(c: &mut Criterion) {
    let phantom = make_disk_phantom(64, 0.5, 1.0).unwrap();
    let angles = scan_angles(90);
    let mut group = c.benchmark_group("radon_64x64_90x95");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| radon_with(black_box(&phantom), &angles, 95, 1.0 / 64.0, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_fbp(c: &mut Criterion) {
    let phantom = make_disk_phantom(64, 0.5, 1.0).unwrap();
    let sino = radon_with(&phantom, &scan_angles(90), 95, 1.0 / 64.0, Execution::Sequential).unwrap();
    let params = ReconParams::new(64, 90, 95).unwrap();
    let mut group = c.benchmark_group("fbp_64x64_90x95");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fbp_with(black_box(&sino), &params, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_radon, bench_fbp);
criterion_main!(benches);
