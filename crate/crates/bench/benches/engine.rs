use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedcd_core::client::{ClientState, LocalPlan};
use fedcd_core::engine::{default_hvp_eps, grad_wrt_mask, hvp_mask, loss_and_grads, MaskVector, OwnedBatch};
use fedcd_core::harness::{build_domains, client_seed, initial_params, ExperimentConfig};

fn engine(c: &mut Criterion) {
    let config = ExperimentConfig::benchmark();
    let (train, _) = build_domains(&config).unwrap();
    let spec = &config.model;
    let params = initial_params(&config);
    let mask = MaskVector::ones(spec.mask_width());
    let data = &train[0];
    let minibatch = OwnedBatch::gather(&data.batch(), &(0..config.batch_size).collect::<Vec<_>>());
    let v: Vec<f64> = (0..spec.mask_width()).map(|i| (i as f64).sin()).collect();

    c.bench_function("loss_and_grads/batch32", |b| {
        b.iter(|| loss_and_grads(spec, black_box(&params), &mask, &minibatch.view()).unwrap())
    });
    c.bench_function("grad_wrt_mask/2000", |b| {
        b.iter(|| grad_wrt_mask(spec, black_box(&params), &mask, &data.batch()).unwrap())
    });
    c.bench_function("hvp_mask/2000", |b| {
        b.iter(|| {
            hvp_mask(
                spec,
                black_box(&params),
                &mask,
                &data.batch(),
                &v,
                default_hvp_eps(&mask),
            )
            .unwrap()
        })
    });

    let mut group = c.benchmark_group("local_train");
    group.sample_size(10);
    let grad_g = vec![0.0; spec.mask_width()];
    let plan = LocalPlan {
        round: 2,
        epochs: config.local_epochs,
        batch_size: config.batch_size,
    };
    let mut client = ClientState::new(
        0,
        spec.clone(),
        data.clone(),
        config.client_hyper(),
        client_seed(&config, 0),
    )
    .unwrap();
    group.bench_function("fedcd_round", |b| {
        b.iter(|| client.local_train(black_box(&params), Some(&grad_g), &plan).unwrap())
    });
    group.finish();
}

criterion_group!(benches, engine);
criterion_main!(benches);
