mod support;

use lbmnar::model::{Cell, ObservedMatrix};
use lbmnar::{
    cell_probs, complete_loglik, logistic, make_benchmark_params, sample_lbm, CompleteSample, MissingnessKind,
    MnarParams, ModelParams,
};
use proptest::prelude::*;

fn params_3x2(kind: MissingnessKind, vars: [f64; 4]) -> ModelParams {
    ModelParams::new(
        kind,
        vec![0.2, 0.5, 0.3],
        vec![0.45, 0.55],
        vec![vec![0.1, 0.7], vec![0.85, 0.4], vec![0.5, 0.25]],
        0.4,
        vars[0],
        vars[1],
        vars[2],
        vars[3],
    )
    .unwrap()
}

/// Independent term-by-term sum over the sample.
fn loglik_oracle(s: &CompleteSample, p: &ModelParams) -> f64 {
    let normal = |z: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - z * z / (2.0 * v);
    let mut ll = 0.0;
    for &q in &s.row_labels {
        ll += p.alpha_rows[q].ln();
    }
    for &l in &s.col_labels {
        ll += p.alpha_cols[l].ln();
    }
    for (v, var) in [(&s.a, p.var_a), (&s.b, p.var_b), (&s.p, p.var_p), (&s.q, p.var_q)] {
        if var > 0.0 {
            ll += v.iter().map(|z| normal(*z, var)).sum::<f64>();
        }
    }
    let x = s.observed();
    for i in 0..s.n_rows() {
        for j in 0..s.n_cols() {
            let pi = p.pi[s.row_labels[i]][s.col_labels[j]];
            ll += support::cell_prob(x.get(i, j), pi, p.mu, s.a[i], s.b[i], s.p[j], s.q[j]).ln();
        }
    }
    ll
}

#[test]
fn logistic_examples() {
    assert_eq!(logistic(0.0).unwrap(), 0.5);
    assert!((logistic(1.0).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-15);
    assert!(logistic(f64::NAN).is_err());
    assert!(logistic(f64::INFINITY).is_err());
    let (lo, hi) = (logistic(-700.0).unwrap(), logistic(700.0).unwrap());
    assert!(lo > 0.0 && lo.is_finite() && hi <= 1.0);
}

#[test]
fn cell_probs_examples() {
    let c = cell_probs(0.5, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
    assert!((c.p0 - 0.25).abs() < 1e-15 && (c.p1 - 0.25).abs() < 1e-15 && (c.p_na - 0.5).abs() < 1e-15);
    for pi in [0.05, 0.3, 0.9] {
        let c = cell_probs(pi, 1.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!((c.p_na - 0.268_941_421_369_995_1).abs() < 1e-12);
    }
    let c = cell_probs(0.3, 1.0, 0.5, -0.2, 0.0, 0.1).unwrap();
    let p1 = 0.3 / (1.0 + (-(1.0 + 0.5 - 0.2 + 0.1_f64)).exp());
    let p0 = 0.7 / (1.0 + (-(1.0 + 0.5 + 0.2 - 0.1_f64)).exp());
    assert!((c.p1 - p1).abs() < 1e-15 && (c.p0 - p0).abs() < 1e-15);
    assert!(cell_probs(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    assert!(cell_probs(1.2, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
}

#[test]
fn complete_loglik_single_cell() {
    let p = ModelParams::new(MissingnessKind::Mnar, vec![1.0], vec![1.0], vec![vec![0.5]], 0.0, 1.0, 1.0, 1.0, 1.0)
        .unwrap();
    let s = CompleteSample {
        row_labels: vec![0],
        col_labels: vec![0],
        a: vec![0.0],
        b: vec![0.0],
        p: vec![0.0],
        q: vec![0.0],
        x_complete: vec![1],
        mask: vec![1],
        x_observed: None,
    };
    let gauss0 = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((complete_loglik(&s, &p).unwrap() - (0.25f64.ln() + 4.0 * gauss0)).abs() < 1e-12);
}

#[test]
fn complete_loglik_matches_term_sum() {
    for (kind, vars) in [
        (MissingnessKind::Mnar, [0.7, 1.3, 0.4, 0.9]),
        (MissingnessKind::Mar, [0.7, 0.0, 0.4, 0.0]),
        (MissingnessKind::Mcar, [0.0; 4]),
    ] {
        let p = params_3x2(kind, vars);
        let s = sample_lbm(&p, 3, 3, 41).unwrap();
        let v = complete_loglik(&s, &p).unwrap();
        assert!((v - loglik_oracle(&s, &p)).abs() < 1e-10, "{kind}");
    }
}

#[test]
fn mcar_loglik_is_lbm_plus_constant_mask() {
    let p = params_3x2(MissingnessKind::Mcar, [0.0; 4]);
    let s = sample_lbm(&p, 6, 5, 3).unwrap();
    let x = s.observed();
    let obs = logistic(p.mu).unwrap();
    let mut expected: f64 = s.row_labels.iter().map(|&q| p.alpha_rows[q].ln()).sum::<f64>()
        + s.col_labels.iter().map(|&l| p.alpha_cols[l].ln()).sum::<f64>();
    for i in 0..6 {
        for j in 0..5 {
            let pi = p.pi[s.row_labels[i]][s.col_labels[j]];
            expected += match x.get(i, j) {
                Cell::One => pi.ln() + obs.ln(),
                Cell::Zero => (1.0 - pi).ln() + obs.ln(),
                Cell::Missing => (1.0 - obs).ln(),
            };
        }
    }
    assert!((complete_loglik(&s, &p).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn complete_loglik_rejects_mismatches() {
    let p = params_3x2(MissingnessKind::Mar, [0.5, 0.0, 0.5, 0.0]);
    let mut s = sample_lbm(&p, 4, 4, 1).unwrap();
    s.b[0] = 0.3;
    assert!(complete_loglik(&s, &p).is_err());
    let mut s = sample_lbm(&p, 4, 4, 1).unwrap();
    s.col_labels[1] = 5;
    assert!(complete_loglik(&s, &p).is_err());
    let mut s = sample_lbm(&p, 4, 4, 1).unwrap();
    s.a.pop();
    assert!(complete_loglik(&s, &p).is_err());
}

#[test]
fn observed_matrix_rejects_bad_shapes() {
    assert!(ObservedMatrix::new(0, 3, vec![]).is_err());
    assert!(ObservedMatrix::new(2, 2, vec![Cell::One; 3]).is_err());
    assert!(ObservedMatrix::from_rows(vec![vec![Cell::One], vec![Cell::One, Cell::Zero]]).is_err());
}

#[test]
fn benchmark_pattern() {
    let p = make_benchmark_params(0.1, &MnarParams::benchmark()).unwrap();
    assert_eq!(p.pi[0][2], 0.9);
    assert_eq!(p.pi[0][0], 0.1);
    let e = 0.1;
    let f = 0.9;
    assert_eq!(p.pi, vec![vec![e, e, f], vec![e, f, f], vec![f, f, e]]);
    assert_eq!(p.kind, MissingnessKind::Mnar);
    assert!(make_benchmark_params(0.5, &MnarParams::benchmark()).is_err());
    assert!(make_benchmark_params(0.0, &MnarParams::benchmark()).is_err());
}

#[test]
fn sampler_is_seeded_and_consistent() {
    let p = make_benchmark_params(0.2, &MnarParams::benchmark()).unwrap();
    let s1 = sample_lbm(&p, 30, 20, 9).unwrap();
    let s2 = sample_lbm(&p, 30, 20, 9).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1.x_complete, sample_lbm(&p, 30, 20, 10).unwrap().x_complete);
    let x = s1.observed();
    for i in 0..30 {
        for j in 0..20 {
            let k = i * 20 + j;
            match x.get(i, j) {
                Cell::Missing => assert_eq!(s1.mask[k], 0),
                Cell::One => assert_eq!((s1.mask[k], s1.x_complete[k]), (1, 1)),
                Cell::Zero => assert_eq!((s1.mask[k], s1.x_complete[k]), (1, 0)),
            }
        }
    }
}

#[test]
fn saturated_mcar_mask_observes_everything() {
    let p = ModelParams::new(
        MissingnessKind::Mcar,
        vec![0.5, 0.5],
        vec![1.0],
        vec![vec![0.3], vec![0.6]],
        20.0,
        0.0,
        0.0,
        0.0,
        0.0,
    )
    .unwrap();
    let s = sample_lbm(&p, 50, 50, 2).unwrap();
    assert!(s.mask.iter().all(|&m| m == 1));
}

#[test]
fn block_means_concentrate_on_pi() {
    let p = make_benchmark_params(0.2, &MnarParams::benchmark()).unwrap();
    let s = sample_lbm(&p, 500, 500, 5).unwrap();
    let mut ones = [[0.0f64; 3]; 3];
    let mut counts = [[0.0f64; 3]; 3];
    for i in 0..500 {
        for j in 0..500 {
            let (q, l) = (s.row_labels[i], s.col_labels[j]);
            ones[q][l] += f64::from(s.x_complete[i * 500 + j]);
            counts[q][l] += 1.0;
        }
    }
    for q in 0..3 {
        for l in 0..3 {
            let pi = p.pi[q][l];
            let se = (pi * (1.0 - pi) / counts[q][l]).sqrt();
            assert!((ones[q][l] / counts[q][l] - pi).abs() < 3.0 * se, "block ({q},{l})");
        }
    }
}

fn arb_pi() -> impl Strategy<Value = f64> {
    1e-6..(1.0 - 1e-6)
}

proptest! {
    #[test]
    fn cell_probs_form_a_simplex(
        pi in arb_pi(),
        mu in -30.0..30.0f64,
        a in -10.0..10.0f64,
        b in -10.0..10.0f64,
        p in -10.0..10.0f64,
        q in -10.0..10.0f64,
    ) {
        let c = cell_probs(pi, mu, a, b, p, q).unwrap();
        prop_assert!(c.p0 >= 0.0 && c.p1 >= 0.0 && c.p_na >= 0.0);
        prop_assert!((c.p0 + c.p1 + c.p_na - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p_na_ignores_pi_without_value_effects(
        pi1 in arb_pi(),
        pi2 in arb_pi(),
        mu in -5.0..5.0f64,
        a in -3.0..3.0f64,
        p in -3.0..3.0f64,
    ) {
        let c1 = cell_probs(pi1, mu, a, 0.0, p, 0.0).unwrap();
        let c2 = cell_probs(pi2, mu, a, 0.0, p, 0.0).unwrap();
        prop_assert!((c1.p_na - c2.p_na).abs() < 1e-12);
    }

    #[test]
    fn logistic_is_odd_symmetric(x in -700.0..700.0f64) {
        prop_assert!((logistic(x).unwrap() + logistic(-x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn complete_loglik_label_switching(seed in 0u64..1000, rp in 0usize..6, cp in 0usize..2) {
        let perms3 = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perms2 = [[0, 1], [1, 0]];
        let p = params_3x2(MissingnessKind::Mnar, [0.6, 0.8, 1.1, 0.5]);
        let s = sample_lbm(&p, 5, 4, seed).unwrap();
        let (row_perm, col_perm) = (perms3[rp], perms2[cp]);
        // new class k is old class perm[k]
        let pp = p.permuted(&row_perm, &col_perm);
        let inv = |perm: &[usize], old: usize| perm.iter().position(|&o| o == old).unwrap();
        let mut s2 = s.clone();
        s2.row_labels = s.row_labels.iter().map(|&q| inv(&row_perm, q)).collect();
        s2.col_labels = s.col_labels.iter().map(|&l| inv(&col_perm, l)).collect();
        let (a, b) = (complete_loglik(&s, &p).unwrap(), complete_loglik(&s2, &pp).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn mnar_with_pinned_value_effects_equals_mar(seed in 0u64..1000) {
        let mnar = params_3x2(MissingnessKind::Mnar, [0.6, 0.0, 1.1, 0.0]);
        let mar = params_3x2(MissingnessKind::Mar, [0.6, 0.0, 1.1, 0.0]);
        let s = sample_lbm(&mar, 4, 5, seed).unwrap();
        let (a, b) = (complete_loglik(&s, &mnar).unwrap(), complete_loglik(&s, &mar).unwrap());
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }
}
