#![allow(clippy::needless_range_loop)]

mod common;

use common::rng;
use fedcd_core::client::{sci_penalty, RoundUpload};
use fedcd_core::engine::{LayerShape, ParamVector};
use fedcd_core::server::*;
use proptest::prelude::*;
use rand::Rng;

fn simplex(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn upload(id: usize, params: Vec<f64>, grad: Vec<f64>, risk: f64) -> RoundUpload {
    let n = params.len();
    RoundUpload {
        client_id: id,
        params: ParamVector::from_parts(params, vec![LayerShape { rows: 1, cols: n - 1 }]).unwrap(),
        sci_grad: grad,
        risk,
        n_samples: 10 + id,
        mask_l1: 0.0,
    }
}

/// Variance of `w_e R_e` by an explicit two-pass loop.
fn naive_variance(w: &[f64], r: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mut mean = 0.0;
    for i in 0..w.len() {
        mean += w[i] * r[i];
    }
    mean /= n;
    let mut acc = 0.0;
    for i in 0..w.len() {
        let d = w[i] * r[i] - mean;
        acc += d * d;
    }
    acc / n
}

#[test]
fn closed_form_example() {
    let w = rea_closed_form(&[1.0, 2.0, 4.0]);
    let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
    for (a, b) in w.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    let it = rea_solve_iterative(&[1.0, 2.0, 4.0], 1e-8).unwrap();
    for (a, b) in it.weights.iter().zip(want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn closed_form_beats_grid_search() {
    // Coarse simplex grid on three clients: nothing on it does better than 1/R.
    let r = [1.0, 2.0, 4.0];
    let best = rea_closed_form(&r);
    let v_best = naive_variance(&best, &r);
    let steps = 400;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let w = [
                i as f64 / steps as f64,
                j as f64 / steps as f64,
                (steps - i - j) as f64 / steps as f64,
            ];
            assert!(naive_variance(&w, &r) >= v_best - 1e-15);
        }
    }
}

#[test]
fn zero_risk_client_takes_the_mass() {
    let w = rea_closed_form(&[1.0, 0.0]);
    assert!(w[1] > 1.0 - 1e-7);
    assert!(w[0] >= 0.0);
    let it = rea_solve_iterative(&[1.0, 0.0], 1e-10).unwrap();
    assert!(it.weights[1] > 0.99);
    assert!(it.weights[0] >= WEIGHT_FLOOR - 1e-15);
}

#[test]
fn softmax_examples_match_high_precision_values() {
    let c = final_coefficients(&[0.0, 0.0], &[0.8, 0.2], 0.0);
    assert!((c[0] - 0.645_656_306_225_795_5).abs() < 1e-12);
    assert!((c[1] - 0.354_343_693_774_204_5).abs() < 1e-12);
    let c = final_coefficients(&[1.0, 0.0], &[0.5, 0.5], 0.5);
    assert!((c[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
    assert!((c[1] - 0.377_540_668_798_145_4).abs() < 1e-12);
}

#[test]
fn identical_gradients_aggregate_to_themselves() {
    let g = vec![0.25, -1.5, 3.0];
    let ups: Vec<_> = (0..3).map(|i| upload(i, vec![0.0, 0.0], g.clone(), 1.0)).collect();
    let out = aggregate_sci_gradients(&ups, &[0.2, 0.3, 0.5]).unwrap();
    for (a, b) in out.iter().zip(&g) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn aggregation_rejects_bad_coefficients() {
    let ups: Vec<_> = (0..2).map(|i| upload(i, vec![1.0, 2.0], vec![0.0], 1.0)).collect();
    assert!(aggregate_params(&ups, &[0.5, 0.6]).is_err());
    assert!(aggregate_params(&ups, &[1.0]).is_err());
    assert!(aggregate_params(&[], &[]).is_err());
}

#[test]
fn upload_order_does_not_change_the_aggregate() {
    let mut r = rng(4);
    let mut ups: Vec<_> = (0..4)
        .map(|i| upload(i, (0..6).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![r.gen()], 1.0))
        .collect();
    let c = simplex(&mut r, 4);
    let a = aggregate_params(&ups, &c).unwrap();
    ups.reverse();
    let rc: Vec<f64> = c.iter().rev().copied().collect();
    let b = aggregate_params(&ups, &rc).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn build_report_is_consistent() {
    let ups: Vec<_> = [0.5, 1.0, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &risk)| upload(i, vec![0.0, 0.0], vec![0.0], risk))
        .collect();
    let rep = build_report(3, &ups, 0.5).unwrap();
    assert_eq!(rep.round, 3);
    assert_eq!(rep.risks, vec![0.5, 1.0, 2.0]);
    assert!((rep.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((rep.c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(rep.variance_at_w <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn variance_identity(seed in any::<u64>(), e in 2usize..=8, dim in 1usize..=64) {
        let mut r = rng(seed);
        let p = simplex(&mut r, e);
        let grads: Vec<Vec<f64>> = (0..e).map(|_| (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let ups: Vec<_> = grads.iter().enumerate().map(|(i, g)| upload(i, vec![0.0, 0.0], g.clone(), 1.0)).collect();
        let gg = aggregate_sci_gradients(&ups, &p).unwrap();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let lhs: f64 = p.iter().zip(&grads).map(|(pe, g)| pe * sq(g)).sum::<f64>() - sq(&gg);
        let rhs: f64 = p.iter().zip(&grads).map(|(pe, g)| pe * sci_penalty(g, &gg).unwrap()).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        prop_assert!(lhs >= -1e-12);
    }

    #[test]
    fn aggregation_matches_naive_sum(seed in any::<u64>(), e in 1usize..6, len in 2usize..20) {
        let mut r = rng(seed);
        let c = simplex(&mut r, e);
        let params: Vec<Vec<f64>> = (0..e).map(|_| (0..len).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let ups: Vec<_> = params.iter().enumerate().map(|(i, v)| upload(i, v.clone(), vec![0.0], 1.0)).collect();
        let agg = aggregate_params(&ups, &c).unwrap();
        for k in 0..len {
            let mut want = 0.0;
            for i in 0..e {
                want += c[i] * params[i][k];
            }
            prop_assert!((agg.values()[k] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn sci_gradients_match_naive_sum(seed in any::<u64>(), e in 1usize..6, dim in 1usize..16) {
        let mut r = rng(seed);
        let p = simplex(&mut r, e);
        let grads: Vec<Vec<f64>> = (0..e).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let ups: Vec<_> = grads.iter().enumerate().map(|(i, g)| upload(i, vec![0.0, 0.0], g.clone(), 1.0)).collect();
        let out = aggregate_sci_gradients(&ups, &p).unwrap();
        for k in 0..dim {
            let want: f64 = (0..e).map(|i| p[i] * grads[i][k]).sum();
            prop_assert!((out[k] - want).abs() <= 1e-14);
        }
    }

    #[test]
    fn rea_solvers_agree_and_beat_uniform(seed in any::<u64>(), e in 2usize..8) {
        let mut r = rng(seed);
        let risks: Vec<f64> = (0..e).map(|_| r.gen_range(0.05..5.0)).collect();
        let closed = rea_closed_form(&risks);
        prop_assert!(naive_variance(&closed, &risks) <= 1e-12);
        prop_assert!((closed.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let it = rea_solve_iterative(&risks, 1e-10).unwrap();
        let gap = closed.iter().zip(&it.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-6, "gap {gap}");
        let uniform = vec![1.0 / e as f64; e];
        prop_assert!(naive_variance(&closed, &risks) < naive_variance(&uniform, &risks));
    }

    #[test]
    fn coefficients_form_a_positive_simplex(seed in any::<u64>(), e in 1usize..10, eta in 0.0f64..5.0) {
        let mut r = rng(seed);
        let w = simplex(&mut r, e);
        let p = simplex(&mut r, e);
        let c = final_coefficients(&w, &p, eta);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(c.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(seed in any::<u64>(), e in 1usize..10, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let z: Vec<f64> = (0..e).map(|_| r.gen_range(-3.0..3.0)).collect();
        let zs: Vec<f64> = z.iter().map(|x| x + shift).collect();
        let a = softmax(&z);
        let b = softmax(&zs);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn variance_helpers_agree(seed in any::<u64>(), e in 1usize..10) {
        let mut r = rng(seed);
        let w = simplex(&mut r, e);
        let risks: Vec<f64> = (0..e).map(|_| r.gen_range(0.0..3.0)).collect();
        prop_assert!((weighted_risk_variance(&w, &risks) - naive_variance(&w, &risks)).abs() <= 1e-14);
    }
}
