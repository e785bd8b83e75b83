use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use latent_bandit::linalg::{orthonormalize_columns, projector_distance};
use latent_bandit::model::{
    sample_trajectory, synth_model, BehaviorPolicy, FeatureSource, LatentLinearBandit, Step,
    Trajectory,
};
use latent_bandit::offline::{
    bound_delta_d, build_moments, compute_delta_off, delta_m_terms, pinv_estimate, ridge_solve, sold,
    split_odd_even, RidgeAccumulator, SoldConfig, SubspaceEstimate, Variant,
};
use latent_bandit::rng::{standard_normal, stream_rng, Stream};

fn random_traj(d: usize, h: usize, rng: &mut latent_bandit::rng::SimRng) -> Trajectory {
    let steps = (0..h)
        .map(|_| Step {
            feature: DVector::from_fn(d, |_, _| standard_normal(rng)),
            reward: standard_normal(rng),
        })
        .collect();
    Trajectory::new(steps, DVector::zeros(1))
}

/// Naive-loop recomputation of the moment statistics.
fn brute_moments(data: &[Trajectory], mu: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = data[0].dim().unwrap();
    let mut m = DMatrix::zeros(d, d);
    let mut d1 = DMatrix::zeros(d, d);
    let mut d2 = DMatrix::zeros(d, d);
    for t in data {
        let mut halves = Vec::new();
        for parity in 0..2 {
            let mut v = DMatrix::<f64>::identity(d, d) * mu;
            let mut b = DVector::<f64>::zeros(d);
            for (i, s) in t.steps().iter().enumerate() {
                if i % 2 == parity {
                    for p in 0..d {
                        b[p] += s.feature[p] * s.reward;
                        for q in 0..d {
                            v[(p, q)] += s.feature[p] * s.feature[q];
                        }
                    }
                }
            }
            let vinv = v.try_inverse().unwrap();
            halves.push((&vinv * b, DMatrix::identity(d, d) - vinv * mu));
        }
        let (b1, c1) = &halves[0];
        let (b2, c2) = &halves[1];
        for p in 0..d {
            for q in 0..d {
                m[(p, q)] += 0.5 * (b1[p] * b2[q] + b2[p] * b1[q]);
            }
        }
        d1 += c1;
        d2 += c2;
    }
    let n = data.len() as f64;
    (m / n, d1 / n, d2 / n)
}

#[test]
fn moments_match_brute_force() {
    let mut rng = stream_rng(4, Stream::Offline);
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let data: Vec<_> = (0..n).map(|_| random_traj(d, rng.random_range(2..=6), &mut rng)).collect();
        let mu = rng.random_range(0.2..2.0);
        let s = build_moments(&data, mu, Variant::Regularized).unwrap();
        let (m, d1, d2) = brute_moments(&data, mu);
        assert!((s.m_bar - m).amax() < 1e-10);
        assert!((s.d_bar_1 - d1).amax() < 1e-10);
        assert!((s.d_bar_2 - d2).amax() < 1e-10);
    }
}

#[test]
fn split_examples() {
    let mut rng = stream_rng(0, Stream::Offline);
    for (h, want) in [(4, (2, 2)), (5, (3, 2))] {
        let t = random_traj(2, h, &mut rng);
        let (a, b) = split_odd_even(&t).unwrap();
        assert_eq!((a.len(), b.len()), want);
    }
    assert!(split_odd_even(&random_traj(2, 1, &mut rng)).is_err());
}

#[test]
fn ridge_closed_forms() {
    let acc = RidgeAccumulator::new(3, 1.0);
    assert_eq!(ridge_solve(&acc).unwrap(), DVector::zeros(3));
    let mut acc = RidgeAccumulator::new(3, 1.0);
    acc.push(&DVector::from_column_slice(&[1.0, 0.0, 0.0]), 1.0);
    assert_abs_diff_eq!(ridge_solve(&acc).unwrap(), DVector::from_column_slice(&[0.5, 0.0, 0.0]), epsilon = 1e-15);
}

#[test]
fn ridge_matches_lu_and_residual() {
    let mut rng = stream_rng(1, Stream::Offline);
    for _ in 0..100 {
        let mut acc = RidgeAccumulator::new(5, rng.random_range(0.1..2.0));
        for _ in 0..rng.random_range(0..12) {
            acc.push(&DVector::from_fn(5, |_, _| standard_normal(&mut rng)), standard_normal(&mut rng));
        }
        let beta = ridge_solve(&acc).unwrap();
        let lu = acc.v().clone().lu().solve(acc.b()).unwrap();
        assert!((&beta - lu).amax() < 1e-10);
        assert!((acc.v() * &beta - acc.b()).norm() <= 1e-8 * acc.b().norm().max(1e-300));
    }
}

#[test]
fn pinv_matches_svd_oracle() {
    let mut rng = stream_rng(2, Stream::Offline);
    for _ in 0..20 {
        // Rank-3 design in R^6: eight rows drawn from a 3-dimensional span.
        let basis = DMatrix::from_fn(3, 6, |_, _| standard_normal(&mut rng));
        let x = DMatrix::from_fn(8, 3, |_, _| standard_normal(&mut rng)) * basis;
        let r = DVector::from_fn(8, |_, _| standard_normal(&mut rng));
        let steps: Vec<Step> = (0..8)
            .map(|i| Step {
                feature: x.row(i).transpose(),
                reward: r[i],
            })
            .collect();
        let refs: Vec<&Step> = steps.iter().collect();
        let (beta, proj) = pinv_estimate(&refs).unwrap();
        let oracle = x.clone().pseudo_inverse(1e-10).unwrap() * &r;
        assert!((&beta - oracle).amax() < 1e-9);
        assert!((&proj * &proj - &proj).amax() < 1e-8);
        assert!((&proj * &beta - &beta).amax() < 1e-8);
    }
}

#[test]
fn pinv_rank_one() {
    let s = Step {
        feature: DVector::from_column_slice(&[1.0, 0.0, 0.0]),
        reward: 2.0,
    };
    let (beta, proj) = pinv_estimate(&[&s]).unwrap();
    assert_abs_diff_eq!(beta, DVector::from_column_slice(&[2.0, 0.0, 0.0]), epsilon = 1e-12);
    let mut e = DMatrix::zeros(3, 3);
    e[(0, 0)] = 1.0;
    assert_abs_diff_eq!(proj, e, epsilon = 1e-12);
}

#[test]
fn noiseless_full_coverage_moment() {
    let beta = DVector::from_column_slice(&[0.3, -1.2, 0.7]);
    let steps: Vec<Step> = (0..6)
        .map(|i| {
            let mut f = DVector::zeros(3);
            f[(i / 2) % 3] = 1.0;
            Step {
                reward: f.dot(&beta),
                feature: f,
            }
        })
        .collect();
    let t = Trajectory::new(steps, DVector::zeros(1));
    let s = build_moments(&[t], 1.0, Variant::Pseudoinverse).unwrap();
    assert!((s.m_bar - &beta * beta.transpose()).amax() < 1e-8);
}

#[test]
fn huge_mu_sends_correction_to_zero() {
    let mut rng = stream_rng(3, Stream::Offline);
    let data: Vec<_> = (0..5).map(|_| random_traj(3, 6, &mut rng)).collect();
    let s = build_moments(&data, 1e8, Variant::Regularized).unwrap();
    assert!(s.d_bar_1.amax() < 1e-6 && s.d_bar_2.amax() < 1e-6);
}

#[test]
fn delta_d_strictly_decreasing() {
    let mut last = f64::INFINITY;
    for n in [1, 2, 10, 100, 5000, 1_000_000] {
        let v = bound_delta_d(n, 50, 0.05).unwrap();
        assert!(v < last);
        last = v;
    }
    assert!(bound_delta_d(10, 5, 1.0).is_err());
    assert!(bound_delta_d(10, 5, 0.0).is_err());
}

#[test]
fn delta_m_vanishing_limit() {
    assert!(delta_m_terms(0.0, 1_000_000_000_000, 1.0, 1.0, 20, 1.0) <= 1e-5);
}

proptest! {
    #[test]
    fn delta_m_monotone_in_variance(a in 0.0..1e3f64, b in 0.0..1e3f64, n in 1usize..10_000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(delta_m_terms(lo, n, 2.0, 1.0, 20, 1.0) <= delta_m_terms(hi, n, 2.0, 1.0, 20, 1.0));
    }

    #[test]
    fn delta_off_monotone(dm in 0.0..1.0f64, dd in 0.0..0.4f64, bump in 0.0..0.1f64) {
        let base = compute_delta_off(dm, dd, 2.0, 0.5, 2, 1.0).unwrap();
        prop_assert!(compute_delta_off(dm + bump, dd, 2.0, 0.5, 2, 1.0).unwrap() >= base);
        prop_assert!(compute_delta_off(dm, dd + bump, 2.0, 0.5, 2, 1.0).unwrap() >= base);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn estimates_are_projectors(seed in 0u64..1000, d_a in 3usize..8, h in 2usize..8) {
        let m = synth_model(d_a, 2, 0.5, seed).unwrap();
        let mut rng = stream_rng(seed, Stream::Offline);
        let data: Vec<_> = (0..20).map(|_| {
            let theta = latent_bandit::model::sample_theta(&m, &mut rng);
            sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, h, &mut rng)
        }).collect::<Result<_, _>>().unwrap();
        let est = sold(&data, &SoldConfig::new(2)).unwrap();
        let p = est.projector();
        prop_assert!((&p * &p - &p).amax() < 1e-8);
        prop_assert!((&p - p.transpose()).amax() < 1e-12);
    }
}

fn unit_sphere_model(u: DMatrix<f64>) -> LatentLinearBandit {
    let d_k = u.ncols();
    LatentLinearBandit::new(
        u,
        DVector::zeros(d_k),
        DMatrix::identity(d_k, d_k) / d_k as f64,
        0.0,
        1.0,
        0,
        FeatureSource::UnitSphere,
    )
    .unwrap()
}

#[test]
fn noiseless_identifiability() {
    let mut rng = stream_rng(10, Stream::Model);
    for d_a in [3, 5, 8] {
        let u = orthonormalize_columns(&DMatrix::from_fn(d_a, 2, |_, _| standard_normal(&mut rng))).unwrap();
        let m = unit_sphere_model(u.clone());
        let data: Vec<_> = (0..4)
            .map(|_| {
                let theta = DVector::from_fn(2, |_, _| standard_normal(&mut rng));
                sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 2 * d_a + 2, &mut rng).unwrap()
            })
            .collect();
        let est = sold(&data, &SoldConfig::new(2)).unwrap();
        assert!(projector_distance(&est.u_hat, &u) < 1e-6);
    }
}

#[test]
fn rotation_invariance() {
    let mut rng = stream_rng(11, Stream::Model);
    let u = orthonormalize_columns(&DMatrix::from_fn(6, 2, |_, _| standard_normal(&mut rng))).unwrap();
    let angle: f64 = 0.7;
    let a = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
    let m1 = unit_sphere_model(u.clone());
    let m2 = unit_sphere_model(&u * a.transpose());
    let thetas: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_fn(2, |_, _| standard_normal(&mut rng))).collect();
    let gen = |m: &LatentLinearBandit, rot: bool| -> Vec<Trajectory> {
        let mut r = stream_rng(5, Stream::Offline);
        thetas
            .iter()
            .map(|t| {
                let theta = if rot { &a * t } else { t.clone() };
                sample_trajectory(m, &theta, &BehaviorPolicy::Uniform, 8, &mut r).unwrap()
            })
            .collect()
    };
    let e1 = sold(&gen(&m1, false), &SoldConfig::new(2)).unwrap();
    let e2 = sold(&gen(&m2, true), &SoldConfig::new(2)).unwrap();
    assert!((e1.projector() - e2.projector()).amax() < 1e-8);
}

#[test]
fn error_shrinks_with_more_data() {
    let err = |n: usize| -> f64 {
        (0..10)
            .map(|seed| {
                let m = synth_model(50, 2, 0.5, seed).unwrap();
                let mut rng = stream_rng(seed, Stream::Offline);
                let data: Vec<_> = (0..n)
                    .map(|_| {
                        let theta = latent_bandit::model::sample_theta(&m, &mut rng);
                        sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 20, &mut rng).unwrap()
                    })
                    .collect();
                projector_distance(&sold(&data, &SoldConfig::new(2)).unwrap().u_hat, &m.u_star)
            })
            .sum::<f64>()
            / 10.0
    };
    assert!(err(5000) < err(250));
}

#[test]
fn estimate_json_roundtrip() {
    let mut rng = stream_rng(12, Stream::Offline);
    let m = synth_model(6, 2, 0.5, 12).unwrap();
    let data: Vec<_> = (0..100)
        .map(|_| {
            let theta = latent_bandit::model::sample_theta(&m, &mut rng);
            sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 10, &mut rng).unwrap()
        })
        .collect();
    let est = sold(&data, &SoldConfig::new(2)).unwrap();
    let back: SubspaceEstimate = serde_json::from_str(&serde_json::to_string(&est).unwrap()).unwrap();
    assert_eq!(back.u_hat, est.u_hat);
    assert_eq!(back.delta_off.to_bits(), est.delta_off.to_bits());
}
