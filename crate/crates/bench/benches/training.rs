use cellgrow::bilevel::{BilevelConfig, OptimizerState, Order};
use cellgrow::cells::{Backbone, CellSpec};
use cellgrow::search::{SearchTask, Split};
use cellgrow_bench::small_experiment;
use criterion::{criterion_group, criterion_main, Criterion};

fn epochs(c: &mut Criterion) {
    let exp = small_experiment(7, 400);
    let spec = CellSpec::new(Backbone::TwoToOne, 7, 7, 2).unwrap();
    let mut group = c.benchmark_group("epoch");
    group.sample_size(10);
    for (name, cfg, alphas) in [
        ("weights_only", BilevelConfig::default(), false),
        ("first_order", BilevelConfig { order: Order::First, ..BilevelConfig::default() }, true),
        ("second_order", BilevelConfig::default(), true),
    ] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || (exp.init_state(&spec, 0).unwrap(), OptimizerState::new(&cfg), 0usize),
                |(mut state, mut opt, mut cursor)| exp.train_epoch(&spec, &mut state, &mut opt, &mut cursor, alphas, &cfg).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();

    let state = exp.init_state(&spec, 0).unwrap();
    c.bench_function("evaluate_val", |b| b.iter(|| exp.evaluate(&spec, &state, Split::Val).unwrap()));
}

fn split_report(c: &mut Criterion) {
    let exp = small_experiment(7, 400);
    let spec = CellSpec::new(Backbone::TwoToOne, 7, 7, 2).unwrap();
    let state = exp.init_state(&spec, 0).unwrap();
    let edge = spec.edges().next().unwrap().id;
    let mut group = c.benchmark_group("split");
    group.sample_size(10);
    group.bench_function("report_one_edge", |b| b.iter(|| exp.split_report(&spec, &state, edge).unwrap()));
    group.finish();
}

criterion_group!(benches, epochs, split_report);
criterion_main!(benches);
