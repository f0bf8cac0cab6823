use ecoprod_core::causal::*;
use ecoprod_core::dataset::{generate_causal, CausalSpec};
use ecoprod_core::linalg::Matrix;
use ecoprod_core::rng::rng_from;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn randomized(n: usize, p1: f64, p0: f64, seed: u64) -> CausalDataset {
    let mut rng = rng_from(seed);
    let mut x = Matrix::zeros(n, 3);
    let (mut t, mut y) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..3 {
            x[(i, j)] = rng.sample(StandardNormal);
        }
        let ti = rng.random_bool(0.5) as u8;
        t.push(ti);
        y.push(rng.random_bool(if ti == 1 { p1 } else { p0 }) as u8);
    }
    CausalDataset::new(x, t, y, vec!["a".into(), "b".into(), "c".into()]).unwrap()
}

fn confounded(true_ate: f64, seed: u64) -> CausalDataset {
    let g = generate_causal(&CausalSpec {
        true_ate,
        seed,
        ..CausalSpec::default()
    })
    .unwrap();
    let names = (0..g.x.cols()).map(|j| format!("x{j}")).collect();
    CausalDataset::new(g.x, g.t, g.y, names).unwrap()
}

#[test]
fn cevae_randomized_effect() {
    let d = randomized(2000, 0.7, 0.3, 11);
    let m = cevae_fit(&d, &CevaeConfig::desk()).unwrap();
    let est = cevae_ate(&m, &d, 50, 0, Aggregation::Unit).unwrap();
    assert!((est.ate - 0.4).abs() < 0.05, "{est:?}");
}

/// y independent of t with the sample effect removed: within each outcome
/// class exactly half of the units are treated.
fn exact_null(n: usize, seed: u64) -> CausalDataset {
    let mut d = randomized(n, 0.5, 0.5, seed);
    let mut rng = rng_from(seed ^ 0xff);
    d.y = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
    for class in 0..2u8 {
        let mut idx: Vec<usize> = (0..n).filter(|&i| d.y[i] == class).collect();
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        for (k, &i) in idx.iter().enumerate() {
            d.t[i] = (k < half) as u8;
        }
    }
    d
}

#[test]
fn cevae_null_effect() {
    let d = exact_null(2000, 12);
    let m = cevae_fit(&d, &CevaeConfig::desk()).unwrap();
    let est = cevae_ate(&m, &d, 50, 100, Aggregation::Unit).unwrap();
    assert!(est.ate.abs() < 0.05, "{est:?} dm {}", diff_in_means(&d));
    assert!(est.ci_low <= est.ate && est.ate <= est.ci_high);
}

#[test]
fn meta_learners_on_confounded_generator() {
    let d = confounded(0.24, 0);
    let naive = diff_in_means(&d);
    assert!(naive - 0.24 > 0.1, "generator should be confounded: {naive}");
    for m in [Method::S, Method::T, Method::X, Method::R] {
        let ate = meta_ate(m, &d, &MetaConfig::default()).unwrap();
        assert!((ate - 0.24).abs() <= 0.08, "{m:?}: {ate}");
    }
}

#[test]
fn unconfounded_estimators_agree_with_difference_in_means() {
    for seed in 0..2 {
        let d = randomized(2000, 0.55, 0.35, 20 + seed);
        let dm = diff_in_means(&d);
        let n1 = d.t.iter().filter(|&&v| v == 1).count() as f64;
        let n0 = d.len() as f64 - n1;
        let p1 = dm + 0.35;
        let se = (p1 * (1.0 - p1) / n1 + 0.35 * 0.65 / n0).sqrt();
        for m in [Method::S, Method::T, Method::X, Method::R] {
            let ate = meta_ate(m, &d, &MetaConfig::default()).unwrap();
            assert!((ate - dm).abs() <= 2.0 * se, "{m:?}: {ate} vs {dm} (se {se})");
        }
    }
}

#[test]
fn heterogeneous_r_and_group_aggregation() {
    let d = confounded(0.24, 2);
    let groups: Vec<u64> = (0..d.len() as u64).map(|i| i % 27).collect();
    let d = d.with_groups(groups).unwrap();
    let cfg = MetaConfig {
        heterogeneous_r: true,
        aggregation: Aggregation::Group,
        ..MetaConfig::default()
    };
    let ate = meta_ate(Method::R, &d, &cfg).unwrap();
    assert!((-1.0..=1.0).contains(&ate));
    assert!((ate - 0.24).abs() < 0.15, "{ate}");
}

#[test]
fn estimates_are_seed_deterministic() {
    let d = confounded(0.24, 3);
    let cfg = MetaConfig {
        base: BaseLearner::Glm { l2: 1.0 },
        propensity: BaseLearner::Glm { l2: 1.0 },
        ..MetaConfig::default()
    };
    let a = estimate(Method::R, &d, &cfg, 60).unwrap();
    let b = estimate(Method::R, &d, &cfg, 60).unwrap();
    assert_eq!(a, b);
    assert!(a.ci_low <= a.ate && a.ate <= a.ci_high);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ate_in_unit_interval_and_ci_contains_it(seed in 0u64..1000, p1 in 0.05f64..0.95, p0 in 0.05f64..0.95) {
            let d = randomized(200, p1, p0, seed);
            let cfg = MetaConfig { base: BaseLearner::Glm { l2: 1.0 }, propensity: BaseLearner::Glm { l2: 1.0 }, seed, ..MetaConfig::default() };
            for m in [Method::DiffMeans, Method::S, Method::T, Method::X, Method::R] {
                let e = estimate(m, &d, &cfg, 50).unwrap();
                prop_assert!((-1.0..=1.0).contains(&e.ate));
                prop_assert!(e.ci_low <= e.ate && e.ate <= e.ci_high);
            }
            let e = propensity(&d, &BaseLearner::Glm { l2: 1.0 }).unwrap();
            prop_assert!(e.iter().all(|v| (PROPENSITY_CLIP.0..=PROPENSITY_CLIP.1).contains(v)));
        }
    }
}
