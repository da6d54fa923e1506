use hybridlv::analysis::{
    check_moment_condition, check_stability_condition, generator_apply, perturbation_terms,
    sample_lyapunov_exponent, stability_discriminant, ConditionVerdict, LyapunovFunction,
};
use hybridlv::averaging::AveragedCoefficients;
use hybridlv::chain::{build_generator, stationary_distribution, GeneratorSpec, TwoTimeScaleChain};
use hybridlv::dynamics::{CoefficientTable, RegimeCoefficients, SimScheme};
use hybridlv::montecarlo::{run_ensemble, HybridSystem};
use hybridlv::stats::{least_squares_slope, mean_estimate};
use proptest::prelude::*;

fn switching_table() -> CoefficientTable {
    CoefficientTable::new(&[
        RegimeCoefficients {
            b: vec![1.0, 0.4],
            a: vec![vec![1.0, 0.2], vec![0.3, 1.2]],
            sigma: vec![0.3, 0.5],
        },
        RegimeCoefficients {
            b: vec![-0.5, 1.5],
            a: vec![vec![2.0, 0.1], vec![0.0, 0.8]],
            sigma: vec![0.6, 0.2],
        },
    ])
    .unwrap()
}

fn two_state(q12: f64, q21: f64) -> GeneratorSpec {
    build_generator(&[vec![(1, q12)], vec![(0, q21)]], 2, 0.0).unwrap()
}

/// `int_0^H e^{-u} sum_k w_k (p_{lk}(u) - nu_k) du` for a two-state chain with
/// composed rates `(q12, q21)`.
fn closed_form(w: [f64; 2], l: usize, q12: f64, q21: f64, nu: [f64; 2], h: f64) -> f64 {
    let lambda = q12 + q21;
    let nu_eps = [q21 / lambda, q12 / lambda];
    (0..2)
        .map(|k| {
            let delta = if k == l { 1.0 } else { 0.0 };
            w[k] * ((nu_eps[k] - nu[k]) * (1.0 - (-h).exp())
                + (delta - nu_eps[k]) * (1.0 - (-(1.0 + lambda) * h).exp()) / (1.0 + lambda))
        })
        .sum()
}

fn weights(v: &LyapunovFunction, x: &[f64], coeffs: &CoefficientTable) -> ([f64; 2], [f64; 2]) {
    let g = v.gradient(x);
    let h = v.hessian_diag(x);
    let mut w1 = [0.0; 2];
    let mut w2 = [0.0; 2];
    for k in 0..2 {
        let xi = hybridlv::dynamics::drift(x, k, coeffs);
        let s = hybridlv::dynamics::diffusion(x, k, coeffs);
        for i in 0..x.len() {
            w1[k] += g[i] * xi[i];
            w2[k] += 0.5 * h[i] * s[i] * s[i];
        }
    }
    (w1, w2)
}

#[test]
fn perturbation_terms_match_two_state_closed_form() {
    let coeffs = switching_table();
    let fast = two_state(1.0, 2.0);
    let slow = two_state(0.3, 0.1);
    let nu = stationary_distribution(&fast, 1e-14).unwrap();
    let x = [0.7, 1.4];
    for v in [
        LyapunovFunction::PowerSum { p: 2.0 },
        LyapunovFunction::Stability,
        LyapunovFunction::Barrier { gamma: 0.5 },
    ] {
        let (w1, w2) = weights(&v, &x, &coeffs);
        for eps in [0.5, 0.1] {
            let chain = TwoTimeScaleChain::new(fast.clone(), slow.clone(), eps).unwrap();
            let (q12, q21) = (1.0 / eps + 0.3, 2.0 / eps + 0.1);
            for l in 0..2 {
                let t = perturbation_terms(&v, &x, l, &chain, &nu, &coeffs, 40.0).unwrap();
                let n = [nu.nu[0], nu.nu[1]];
                let e1 = closed_form(w1, l, q12, q21, n, 40.0);
                let e2 = closed_form(w2, l, q12, q21, n, 40.0);
                assert!((t.v1 - e1).abs() < 1e-6, "{} V1 {} vs {}", v.label(), t.v1, e1);
                assert!((t.v2 - e2).abs() < 1e-6, "{} V2 {} vs {}", v.label(), t.v2, e2);
            }
        }
    }
}

#[test]
fn perturbation_terms_scale_linearly_in_epsilon() {
    let coeffs = switching_table();
    let fast = two_state(1.0, 1.0);
    let nu = stationary_distribution(&fast, 1e-14).unwrap();
    let v = LyapunovFunction::PowerSum { p: 2.0 };
    let x = [0.8, 0.6];
    let eps = [0.2, 0.1, 0.05];
    let (mut v1, mut v2) = (Vec::new(), Vec::new());
    for &e in &eps {
        let chain = TwoTimeScaleChain::fast_only(fast.clone(), e).unwrap();
        let t = perturbation_terms(&v, &x, 0, &chain, &nu, &coeffs, 40.0).unwrap();
        v1.push(t.v1.abs().ln());
        v2.push(t.v2.abs().ln());
    }
    let le: Vec<f64> = eps.iter().map(|e: &f64| e.ln()).collect();
    let s1 = least_squares_slope(&le, &v1).unwrap();
    let s2 = least_squares_slope(&le, &v2).unwrap();
    assert!((s1 - 1.0).abs() <= 0.3, "V1 slope {s1}");
    assert!((s2 - 1.0).abs() <= 0.3, "V2 slope {s2}");
}

#[test]
fn perturbation_terms_vanish_for_constant_coefficients() {
    let one = RegimeCoefficients {
        b: vec![0.7],
        a: vec![vec![1.3]],
        sigma: vec![0.4],
    };
    let coeffs = CoefficientTable::new(&[one.clone(), one]).unwrap();
    let chain = TwoTimeScaleChain::fast_only(two_state(1.0, 3.0), 0.1).unwrap();
    let nu = stationary_distribution(chain.fast(), 1e-14).unwrap();
    let t = perturbation_terms(&LyapunovFunction::Stability, &[0.9], 1, &chain, &nu, &coeffs, 40.0)
        .unwrap();
    assert_eq!((t.v1, t.v2), (0.0, 0.0));

    let single = CoefficientTable::new(&[RegimeCoefficients {
        b: vec![0.7],
        a: vec![vec![1.3]],
        sigma: vec![0.4],
    }])
    .unwrap();
    let trivial = TwoTimeScaleChain::fast_only(GeneratorSpec::trivial(), 0.1).unwrap();
    let point = hybridlv::chain::StationaryDistribution::point_mass();
    let t = perturbation_terms(&LyapunovFunction::Stability, &[0.9], 0, &trivial, &point, &single, 40.0)
        .unwrap();
    assert_eq!((t.v1, t.v2), (0.0, 0.0));
}

#[test]
fn moment_condition_constant_in_state() {
    let one = RegimeCoefficients {
        b: vec![1.0, 2.0],
        a: vec![vec![2.0, 0.0], vec![0.0, 4.0]],
        sigma: vec![1.0, 0.0],
    };
    let coeffs = CoefficientTable::new(&[one.clone(), one.clone(), one]).unwrap();
    let r = check_moment_condition(&coeffs, 2.0, f64::INFINITY);
    // (1 + 2 + 2) / 2 + (1 + 4) / 4
    assert_eq!(r.value, 3.75);
    assert_eq!(r.verdict, ConditionVerdict::HoldsOnWindow);
}

/// Short-time ensemble increments of `V` against the generator at three
/// interior points.
#[test]
fn generator_matches_ensemble_increments() {
    let coeffs = switching_table();
    let h = 0.002;
    let scheme = SimScheme::with_dt(1e-4).recording_every(20);
    let n = 100_000;
    let points: [([f64; 2], usize); 3] = [([0.8, 0.5], 0), ([1.5, 0.3], 1), ([0.4, 1.1], 0)];
    let functions = [
        LyapunovFunction::Stability,
        LyapunovFunction::PowerSum { p: 2.0 },
        LyapunovFunction::ReciprocalPower {
            theta: 1.5,
            kappa: 0.0,
            time: 0.0,
        },
    ];
    for (idx, (x, alpha)) in points.iter().enumerate() {
        let sys = HybridSystem::new(coeffs.clone(), GeneratorSpec::frozen(2), x.to_vec(), *alpha, "");
        let ens = run_ensemble(&sys, n, h, &scheme, 77 + idx as u64).unwrap();
        for v in &functions {
            let v0 = v.value(x);
            let incr: Vec<f64> = ens
                .trajectories
                .iter()
                .map(|t| (v.value(t.terminal()) - v0) / h)
                .collect();
            let e = mean_estimate(&incr);
            let exact = generator_apply(v, x, *alpha, &coeffs);
            let tol = 4.0 * e.standard_error() + 0.02 * exact.abs().max(0.5);
            assert!(
                (e.mean - exact).abs() <= tol,
                "{} at {x:?}: ensemble {} vs generator {exact} (tol {tol})",
                v.label(),
                e.mean
            );
        }
    }
}

#[test]
fn gbm_lyapunov_exponent() {
    let (b, sigma) = (-0.3, 0.5);
    let coeffs = CoefficientTable::without_competition_check(&[RegimeCoefficients {
        b: vec![b],
        a: vec![vec![0.0]],
        sigma: vec![sigma],
    }])
    .unwrap();
    let sys = HybridSystem::new(coeffs, GeneratorSpec::trivial(), vec![1.0], 0, "");
    let ens = run_ensemble(&sys, 400, 20.0, &SimScheme::with_dt(1e-3).recording_every(10), 5).unwrap();
    let exps: Vec<f64> = ens
        .trajectories
        .iter()
        .map(|t| sample_lyapunov_exponent(t, 0, 2.0).unwrap())
        .collect();
    let e = mean_estimate(&exps);
    // r - sigma^2 / 2 = b
    assert!((e.mean - b).abs() <= 3.0 * e.standard_error(), "{} vs {b}", e.mean);
}

#[test]
fn stability_condition_example_and_identity() {
    let r = check_stability_condition(&AveragedCoefficients::from_parts(
        vec![1.0],
        vec![-0.5],
        vec![vec![1.0]],
        vec![0.0],
        0.0,
    ));
    // Inputs taken literally: (1 - 1)^2 + 4 (-0.5 + 0) = -2.
    assert_eq!(r.value, -2.0);
    assert_eq!(r.verdict, ConditionVerdict::Holds);
}

proptest! {
    /// With `r = b + sigma^2 / 2` the discriminant equals
    /// `(r + a)^2 + 2 a sigma^2`, so it is never negative for `a > 0`.
    #[test]
    fn discriminant_is_nonnegative_for_ito_consistent_inputs(
        b in -5.0f64..5.0,
        s in 0.0f64..3.0,
        a in 0.01f64..5.0,
    ) {
        let r = b + 0.5 * s * s;
        let d = stability_discriminant(r, a, b, s);
        let expect = (r + a).powi(2) + 2.0 * a * s * s;
        prop_assert!((d - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        prop_assert!(d >= 0.0);
    }
}
