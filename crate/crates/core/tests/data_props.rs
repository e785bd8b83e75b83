use std::io::Write;

use proptest::prelude::*;

use latent_bandit::data::{
    als_factorize, build_rounds, filter_min_counts, load_ratings, parse_ratings, synthetic_ratings, write_ratings,
    FactorModel, Rating, RatingsTable, SyntheticRatingsConfig,
};
use latent_bandit::model::Environment;
use latent_bandit::Error;

fn small_corpus(seed: u64) -> RatingsTable {
    synthetic_ratings(&SyntheticRatingsConfig {
        n_users: 60,
        n_items: 24,
        true_rank: 3,
        density: 0.5,
        noise_std: 0.3,
        seed,
    })
    .unwrap()
}

fn rmse(table: &RatingsTable, m: &FactorModel) -> f64 {
    let sse: f64 = table
        .triples()
        .iter()
        .map(|r| (r.value - m.user_beta(r.user).dot(&m.item_feature(r.item))).powi(2))
        .sum();
    (sse / table.len() as f64).sqrt()
}

#[test]
fn parse_reindexes_and_counts() {
    let text = "10::7::4::978300760\n3::7::2.5::978300761\n10::9::5::1\n10::7::1::2\nbogus\n";
    // One malformed line out of five is above the tolerance.
    assert!(matches!(parse_ratings(text), Err(Error::Format(_))));
    let mut ok = String::new();
    for i in 0..200 {
        ok.push_str(&format!("{}::{}::3::{}\n", i % 7 + 1, i % 11 + 1, i));
    }
    ok.push_str("1::1::9::0\n");
    let t = parse_ratings(&ok).unwrap();
    assert_eq!((t.user_count(), t.item_count(), t.malformed), (7, 11, 1));
    assert_eq!(t.len() + t.duplicates, 200);

    let t = parse_ratings("10::7::4::978300760\n3::7::2.5::978300761\n10::9::5::1\n10::7::1::2\n").unwrap();
    assert_eq!((t.user_count(), t.item_count(), t.duplicates), (2, 2, 1));
    assert_eq!(t.triples()[0], Rating { user: 1, item: 0, value: 4.0 });
    assert_eq!(t.triples()[1], Rating { user: 0, item: 0, value: 2.5 });
}

#[test]
fn load_roundtrip_through_file() {
    let table = filter_min_counts(&small_corpus(1), 1, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.dat");
    write_ratings(&table, &path).unwrap();
    let back = load_ratings(&path).unwrap();
    assert_eq!(back.triples(), table.triples());

    let bad = dir.path().join("bad.dat");
    let mut f = std::fs::File::create(&bad).unwrap();
    writeln!(f, "a,b,c\nd,e,f").unwrap();
    assert!(matches!(load_ratings(&bad), Err(Error::Format(_))));
    assert!(matches!(load_ratings(&dir.path().join("missing.dat")), Err(Error::Io(_))));
}

#[test]
fn filter_thresholds_hold_and_empty_is_an_error() {
    let table = small_corpus(2);
    let f = filter_min_counts(&table, 15, 8).unwrap();
    let mut users = vec![0; f.user_count()];
    let mut items = vec![0; f.item_count()];
    for r in f.triples() {
        users[r.user] += 1;
        items[r.item] += 1;
    }
    assert!(users.iter().all(|&n| n >= 8));
    assert!(items.iter().all(|&n| n >= 15));
    assert!(matches!(filter_min_counts(&table, 10_000, 1), Err(Error::EmptyAfterFilter)));
}

#[test]
fn als_is_finite_and_improves() {
    let table = small_corpus(3);
    let m = als_factorize(&table, 4, 0.1, 10, 3).unwrap();
    assert!(m.user_factors.iter().chain(m.item_factors.iter()).all(|v| v.is_finite()));
    assert_eq!(m.rmse_history.len(), 10);
    assert!(m.rmse_history[9] <= m.rmse_history[0]);
    assert!(als_factorize(&table, 0, 0.1, 10, 3).is_err());
}

#[test]
fn normalization_keeps_predictions() {
    let table = small_corpus(4);
    let m = als_factorize(&table, 3, 0.1, 8, 4).unwrap();
    let max_item = m.item_factors.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    assert!((max_item - 1.0).abs() < 1e-12);
    assert!((rmse(&table, &m) - m.rmse_history.last().unwrap()).abs() < 1e-10);
}

#[test]
fn truncation_puts_users_in_subspace() {
    let table = small_corpus(5);
    let m = als_factorize(&table, 6, 0.1, 8, 5).unwrap().truncate_latent(2).unwrap().with_noise(0.2);
    m.validate().unwrap();
    let p = &m.u_star * m.u_star.transpose();
    for i in 0..m.n_users() {
        let b = m.user_beta(i);
        assert!((&p * &b - &b).amax() < 1e-10);
    }
    assert!(m.reward_bound >= m.max_user_norm());
    let back = FactorModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn rounds_sample_items_uniformly() {
    let table = small_corpus(6);
    let m = als_factorize(&table, 3, 0.1, 5, 6).unwrap();
    let (k, t) = (5, 10_000);
    let rounds = build_rounds(&m, k, t, 6).unwrap();
    let mut counts = vec![0usize; m.n_items()];
    for r in &rounds {
        for f in &r.features {
            let j = (0..m.n_items()).find(|&j| m.item_feature(j) == *f).unwrap();
            counts[j] += 1;
        }
    }
    let p = k as f64 / m.n_items() as f64;
    let mean = t as f64 * p;
    let band = 3.0 * (t as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() <= band, "{c} vs {mean} +/- {band}");
    }
    assert!(m.action_round(m.n_items() + 1, &mut latent_bandit::rng::stream_rng(0, latent_bandit::rng::Stream::Rounds)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filter_is_idempotent(seed in 0u64..1000, mi in 1usize..20, mu in 1usize..12) {
        let table = small_corpus(seed);
        if let Ok(once) = filter_min_counts(&table, mi, mu) {
            let twice = filter_min_counts(&once, mi, mu).unwrap();
            prop_assert_eq!(once.triples(), twice.triples());
            prop_assert_eq!(once.user_count(), twice.user_count());
        }
    }
}
