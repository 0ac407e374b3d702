use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use peerfx::montecarlo::{run_mc, Execution, McDesign, Specification, Variant};

fn design(variant: Variant, point: f64) -> McDesign {
    McDesign {
        grid: vec![point],
        specifications: vec![Specification::ContextualOnly],
        ..McDesign::table(variant, 1600, 32, 1)
    }
}

fn replications(c: &mut Criterion) {
    let mut group = c.benchmark_group("mc_32_reps");
    group.sample_size(10);
    for (name, d) in [
        ("table1_rho0.5", design(Variant::MissingData, 0.5)),
        ("table2_psi0.4", design(Variant::GroupUncertainty, 0.4)),
    ] {
        group.bench_with_input(BenchmarkId::new("sequential", name), &d, |b, d| {
            b.iter(|| run_mc(d, Execution::Sequential).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", name), &d, |b, d| {
            b.iter(|| run_mc(d, Execution::Parallel).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replications);
criterion_main!(benches);
