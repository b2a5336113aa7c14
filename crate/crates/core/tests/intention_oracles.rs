use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use reach_core::intention::*;

fn sample_hmm(model: &HmmModel, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = if rng.random::<f64>() < model.initial[0] { 0 } else { 1 };
    let mut xs = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let d = Normal::new(model.means[s], model.variances[s].sqrt()).unwrap();
        xs.push(d.sample(&mut rng));
        states.push(s);
        s = if rng.random::<f64>() < model.transition[s][0] { 0 } else { 1 };
    }
    (xs, states)
}

fn reference() -> HmmModel {
    HmmModel {
        initial: [1.0, 0.0],
        transition: [[0.95, 0.05], [0.1, 0.9]],
        means: [0.0, 1.0],
        variances: [0.01, 0.01],
    }
}

/// Textbook forward recursion with plain probabilities, normalised per step.
fn forward_oracle(model: &HmmModel, xs: &[f64]) -> Vec<[f64; 2]> {
    let pdf = |i: usize, x: f64| {
        let v = model.variances[i];
        (-(x - model.means[i]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    };
    let mut out = Vec::new();
    let mut prev: Option<[f64; 2]> = None;
    for &x in xs {
        let prior = match prev {
            None => model.initial,
            Some(p) => [
                p[0] * model.transition[0][0] + p[1] * model.transition[1][0],
                p[0] * model.transition[0][1] + p[1] * model.transition[1][1],
            ],
        };
        let u = [prior[0] * pdf(0, x), prior[1] * pdf(1, x)];
        let z = u[0] + u[1];
        let p = [u[0] / z, u[1] / z];
        out.push(p);
        prev = Some(p);
    }
    out
}

#[test]
fn forward_filter_matches_textbook_recursion() {
    let model = reference();
    let (xs, _) = sample_hmm(&model, 50, 3);
    let fast = forward_filter(&model, &xs);
    let slow = forward_oracle(&model, &xs);
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }
    // The streaming step gives the same posteriors.
    let mut belief = IntentionBelief::from_model(&model);
    for (k, &x) in xs.iter().enumerate() {
        belief = forward_step(&model, &belief, x);
        assert!((belief.p[1] - fast[k][1]).abs() < 1e-12);
    }
}

#[test]
fn baum_welch_recovers_generating_model() {
    let truth = reference();
    let (xs, _) = sample_hmm(&truth, 2000, 11);
    let init = HmmModel::initialize(&[xs.clone()]).unwrap();
    let fit = baum_welch(&[xs], &init, 1e-8, 500).unwrap();
    let m = &fit.model;
    let close = |a: f64, b: f64, scale: f64| (a - b).abs() <= 0.1 * scale;
    assert!(close(m.means[0], 0.0, 1.0), "{:?}", m);
    assert!(close(m.means[1], 1.0, 1.0), "{:?}", m);
    assert!(close(m.variances[0].sqrt(), 0.1, 0.1) && close(m.variances[1].sqrt(), 0.1, 0.1), "{:?}", m);
    for j in 0..2 {
        for i in 0..2 {
            assert!(close(m.transition[j][i], truth.transition[j][i], truth.transition[j][i].max(0.1)), "{:?}", m);
        }
    }
}

#[test]
fn baum_welch_likelihood_never_decreases_over_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stay0 = rng.random_range(0.7..0.99);
        let stay1 = rng.random_range(0.7..0.99);
        let gen = HmmModel {
            initial: [1.0, 0.0],
            transition: [[stay0, 1.0 - stay0], [1.0 - stay1, stay1]],
            means: [0.0, rng.random_range(0.3..3.0)],
            variances: [rng.random_range(0.01..0.5), rng.random_range(0.01..0.5)],
        };
        let (xs, _) = sample_hmm(&gen, 400, seed + 1000);
        let init = HmmModel::initialize(&[xs.clone()]).unwrap();
        let fit = baum_welch(&[xs], &init, 0.0, 60).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-7 * w[0].abs().max(1.0), "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn constant_sequence_gets_variance_floor() {
    let xs = vec![vec![0.5; 200]];
    let init = HmmModel {
        initial: [1.0, 0.0],
        transition: [[0.95, 0.05], [0.05, 0.95]],
        means: [0.4, 0.6],
        variances: [0.1, 0.1],
    };
    let fit = baum_welch(&xs, &init, 1e-6, 50).unwrap();
    assert!(fit.model.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    assert!(!fit.warnings.is_empty());
}

#[test]
fn emission_means_stay_ordered() {
    let (xs, _) = sample_hmm(&reference(), 1000, 5);
    let init = HmmModel::initialize(&[xs.clone()]).unwrap();
    let fit = baum_welch(&[xs], &init, 1e-6, 100).unwrap();
    assert!(fit.model.means[0] <= fit.model.means[1]);
    fit.model.validate().unwrap();
}

proptest! {
    #[test]
    fn forward_step_stays_on_simplex(
        xs in prop::collection::vec(prop_oneof![-1e6f64..1e6, -1.0f64..2.0, Just(1e300), Just(-1e300)], 1..60),
        stay in 0.5f64..0.999,
        var in 1e-6f64..10.0,
    ) {
        let model = HmmModel {
            initial: [1.0, 0.0],
            transition: [[stay, 1.0 - stay], [1.0 - stay, stay]],
            means: [0.0, 1.0],
            variances: [var, var * 3.0],
        };
        let mut b = IntentionBelief::from_model(&model);
        for &x in &xs {
            b = forward_step(&model, &b, x);
            prop_assert!(b.p.iter().all(|p| p.is_finite() && *p >= 0.0));
            prop_assert!((b.p[0] + b.p[1] - 1.0).abs() < 1e-9);
        }
    }
}
