use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use packsim_bench::characteristics;
use packsim_core::bus::{solve_bus_constant_power, solve_bus_resistive};
use packsim_core::scenario::{golden, run_scenario_with};

fn bus_solvers(c: &mut Criterion) {
    let mut group = c.benchmark_group("bus");
    for n in [3, 16, 128] {
        let chars = characteristics(n);
        group.bench_with_input(BenchmarkId::new("resistive", n), &chars, |b, ch| {
            b.iter(|| solve_bus_resistive(black_box(ch), 47.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("constant_power", n), &chars, |b, ch| {
            b.iter(|| solve_bus_constant_power(black_box(ch), 30.0).unwrap())
        });
    }
    group.finish();
}

fn scenario(c: &mut Criterion) {
    let cfg = golden::test1();
    c.bench_function("scenario/test1", |b| b.iter(|| run_scenario_with(black_box(&cfg), &mut |_| {}).unwrap()));
}

criterion_group!(benches, bus_solvers, scenario);
criterion_main!(benches);
