mod common;

use common::rng;
use fedcd_core::engine::{MlpSpec, ParamVector};
use fedcd_core::envgen::{generate_environment, EnvSpec};
use fedcd_core::harness::metrics::{to_jsonl, Record};
use fedcd_core::harness::report::report;
use fedcd_core::harness::sweep::run_file_name;
use fedcd_core::harness::*;
use fedcd_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;

fn small(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig::benchmark().with_method(method);
    for e in &mut c.env_specs {
        e.n_samples = 150;
    }
    c.model.hidden_dims = vec![8, 6];
    c.rounds = 5;
    c.local_epochs = 1;
    c
}

#[test]
fn evaluation_of_uninformative_logits_is_a_coin_flip() {
    let mut r = rng(1);
    let mut ds = generate_environment(&EnvSpec::new(0, 10_000, 0.5, 3)).unwrap();
    let mut labels: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
    labels.shuffle(&mut r);
    ds.labels = labels;
    let spec = MlpSpec::new(ds.dim(), vec![16], 2);
    let values = (0..spec.num_params()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let params = ParamVector::from_parts(values, spec.layer_shapes()).unwrap();
    let acc = evaluate(&spec, &params, &ds).unwrap();
    assert!((acc - 0.5).abs() <= 0.015, "{acc}");
}

#[test]
fn zero_network_predicts_class_zero() {
    let ds = generate_environment(&EnvSpec::new(0, 500, 0.5, 4)).unwrap();
    let spec = MlpSpec::new(ds.dim(), vec![4], 2);
    let params = ParamVector::zeros_for(&spec);
    let zeros = ds.labels.iter().filter(|&&y| y == 0).count() as f64 / ds.len() as f64;
    assert_eq!(evaluate(&spec, &params, &ds).unwrap(), zeros);
}

#[test]
fn slope_examples() {
    assert_eq!(ols_slope(&[3.0; 6]).unwrap(), 0.0);
    assert!((ols_slope(&[32.0, 31.0, 30.0, 29.0, 28.0]).unwrap() + 1.0).abs() < 1e-12);
    let short = RunResult {
        rounds: Vec::new(),
        ..run_experiment(&small(Method::Fedavg)).unwrap()
    };
    assert!(matches!(l1_trend(&short), Err(e) if e.is_usage()));
}

#[test]
fn one_round_fedcd_equals_fedavg() {
    let mut a = small(Method::Fedavg);
    a.rounds = 1;
    let mut b = a.clone().with_method(Method::FedcdSci);
    b.rounds = 1;
    let mut sa = Simulation::new(a, RunOptions::default()).unwrap();
    let mut sb = Simulation::new(b, RunOptions::default()).unwrap();
    let ma = sa.step().unwrap();
    let mb = sb.step().unwrap();
    assert_eq!(sa.global().params, sb.global().params);
    assert_eq!(ma.global_test_accuracy, mb.global_test_accuracy);
    assert_eq!(ma.mean_mask_l1, mb.mean_mask_l1);
}

#[test]
fn identical_configs_give_identical_jsonl() {
    let c = small(Method::FedcdSciRea);
    let mut one = Vec::new();
    let mut two = Vec::new();
    run_experiment_with(&c, RunOptions { workers: 1 }, Some(&mut one)).unwrap();
    run_experiment_with(&c, RunOptions { workers: 3 }, Some(&mut two)).unwrap();
    assert_eq!(one, two);
    let r = run_experiment(&c).unwrap();
    assert_eq!(to_jsonl(&c, &r).unwrap().into_bytes(), one);
}

#[test]
fn records_carry_digests() {
    let c = small(Method::FedcdSci);
    let mut buf = Vec::new();
    let result = run_experiment_with(&c, RunOptions::default(), Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.ends_with('\n'));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), c.rounds + 1);
    for line in &lines[..c.rounds] {
        match serde_json::from_str::<Record>(line).unwrap() {
            Record::Round(r) => {
                assert_eq!(r.config_digest, c.digest());
                assert!(r.metrics.aggregation.is_some());
                assert!((0.0..=1.0).contains(&r.metrics.global_test_accuracy));
            }
            Record::Result(_) => panic!("result record before the end"),
        }
    }
    match serde_json::from_str::<Record>(lines[c.rounds]).unwrap() {
        Record::Result(r) => {
            assert_eq!(r.config_digest, c.digest());
            assert_eq!(r.final_test_accuracy, result.final_test_accuracy);
            assert!(r.worst_domain_accuracy <= r.final_test_accuracy + 1e-12);
        }
        Record::Round(_) => panic!("missing result record"),
    }
}

#[test]
fn baselines_log_no_aggregation_report() {
    let r = run_experiment(&small(Method::Fedprox)).unwrap();
    assert!(r.rounds.iter().all(|m| m.aggregation.is_none()));
    assert!(r.rounds.iter().all(|m| m.mean_mask_l1 == 6.0));
}

#[test]
fn rotation_takes_the_minimum() {
    let mut c = small(Method::Fedavg);
    c.rounds = 2;
    let all = run_rotation(&c, RunOptions::default()).unwrap();
    assert_eq!(all.len(), 4);
    let worst = all.iter().map(|r| r.final_test_accuracy).fold(f64::INFINITY, f64::min);
    assert!(all.iter().all(|r| r.worst_domain_accuracy == worst));
}

#[test]
fn sweep_statistics() {
    let c = small(Method::Fedavg);
    let (s, runs) = seed_sweep(&c, &[3, 3, 3], RunOptions::default()).unwrap();
    let worst = s.metric("worst_domain_accuracy").unwrap();
    assert_eq!(worst.variance, Some(0.0));
    assert_eq!(runs.len(), 3);

    let (s, runs) = seed_sweep(&c, &[1, 2], RunOptions::default()).unwrap();
    let mean = (runs[0].final_test_accuracy + runs[1].final_test_accuracy) / 2.0;
    assert!((s.metric("final_test_accuracy").unwrap().mean - mean).abs() < 1e-15);
    assert!(seed_sweep(&c, &[1], RunOptions::default()).is_err());
}

#[test]
fn sweep_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(Method::Fedavg);
    let methods = [Method::Fedavg, Method::FedcdSci];
    let out = run_sweep(&c, &[0, 1], &methods, dir.path(), RunOptions::default()).unwrap();
    assert_eq!(
        out.files.iter().filter(|p| p.extension().unwrap() == "jsonl").count(),
        4
    );
    let csv_a = std::fs::read(dir.path().join("sweep.csv")).unwrap();

    let (expected, _) = seed_sweep(&c.clone().with_method(Method::FedcdSci), &[0, 1], RunOptions::default()).unwrap();
    let rep = report(dir.path(), false).unwrap();
    let got = rep.summaries.iter().find(|s| s.method == Method::FedcdSci).unwrap();
    for name in ["final_test_accuracy", "worst_domain_accuracy"] {
        assert_eq!(got.metric(name).unwrap().mean, expected.metric(name).unwrap().mean);
    }
    for f in ["l1_by_round.csv", "accuracy_by_round.csv", "report.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let again = tempfile::tempdir().unwrap();
    run_sweep(&c, &[0, 1], &methods, again.path(), RunOptions::default()).unwrap();
    assert_eq!(csv_a, std::fs::read(again.path().join("sweep.csv")).unwrap());
}

#[test]
fn report_on_a_single_run_repeats_its_result() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(Method::FedcdSciRea);
    let r = run_experiment(&c).unwrap();
    std::fs::write(
        dir.path().join(run_file_name(c.method, c.seed)),
        to_jsonl(&c, &r).unwrap(),
    )
    .unwrap();
    let rep = report(dir.path(), false).unwrap();
    assert_eq!(rep.runs.len(), 1);
    let s = &rep.summaries[0];
    assert_eq!(s.metric("final_test_accuracy").unwrap().mean, r.final_test_accuracy);
    assert_eq!(s.metric("worst_domain_accuracy").unwrap().mean, r.worst_domain_accuracy);
}

#[test]
fn report_errors() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(report(empty.path(), false), Err(e) if e.is_usage()));

    let dir = tempfile::tempdir().unwrap();
    let c = small(Method::Fedavg);
    let r = run_experiment(&c).unwrap();
    let mut text = to_jsonl(&c, &r).unwrap();
    text.insert_str(text.find('\n').unwrap() + 1, "{not json\n");
    std::fs::write(dir.path().join("bad.jsonl"), text).unwrap();
    match report(dir.path(), false) {
        Err(Error::Parse { path, line, .. }) => {
            assert!(path.ends_with("bad.jsonl"));
            assert_eq!(line, 2);
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    let mixed = tempfile::tempdir().unwrap();
    let mut other = c.clone();
    other.lr_theta = 0.02;
    for (name, cfg) in [("a.jsonl", &c), ("b.jsonl", &other)] {
        let res = run_experiment(cfg).unwrap();
        std::fs::write(mixed.path().join(name), to_jsonl(cfg, &res).unwrap()).unwrap();
    }
    assert!(matches!(report(mixed.path(), false), Err(e) if e.is_usage()));
    assert!(report(mixed.path(), true).is_ok());
}

#[test]
fn overrides_and_validation() {
    let base = ExperimentConfig::benchmark();
    let c = base
        .with_overrides(&["seed=7", "model.hidden_dims=[16,8]", "env_specs.0.rho=0.5"])
        .unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.model.hidden_dims, vec![16, 8]);
    assert_eq!(c.env_specs[0].rho, 0.5);
    assert_ne!(c.digest(), base.digest());
    assert_eq!(base.with_overrides(&["seed=1", "seed=2"]).unwrap().seed, 2);
    assert!(base.with_overrides(&["no_such_key=1"]).is_err());

    let mut bad = base.clone();
    bad.lambda = -1.0;
    bad.model.input_dim = 3;
    let v = bad.violations();
    assert!(v.iter().any(|m| m.contains("lambda")), "{v:?}");
    assert!(v.iter().any(|m| m.contains("input_dim")), "{v:?}");
    assert!(bad.validate().is_err());

    let avg = base.clone().with_method(Method::Fedavg);
    assert_eq!(avg.lineage_digest(), base.clone().with_seed(9).lineage_digest());
    assert_ne!(avg.digest(), base.digest());

    let back = ExperimentConfig::from_json(&base.to_json_pretty()).unwrap();
    assert_eq!(back, base);
}
