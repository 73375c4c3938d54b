//! Independent oracles and dataset builders shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use strat_tte::data::{SubjectRecord, TrialDataset};
use strat_tte::nuisance::{HazardLearner, NuisanceSpec};

/// Random small trial. Every stratum holds at least one subject per arm.
pub fn random_trial(rng: &mut ChaCha8Rng, n: usize, horizon: u32, n_strata: usize, censor_prob: f64) -> TrialDataset {
    assert!(n >= 2 * n_strata);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let (stratum, a) = if i < 2 * n_strata { (i / 2, (i % 2) as u8) } else { (rng.gen_range(0..n_strata), rng.gen_range(0..2u8)) };
        let x = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        subjects.push(SubjectRecord {
            id: format!("s{i}"),
            x,
            stratum,
            a,
            u: rng.gen_range(1..=horizon),
            delta: (rng.gen::<f64>() >= censor_prob) as u8,
        });
    }
    TrialDataset::new(subjects, horizon, vec!["X1".into(), "X2".into()], (0..n_strata).map(|s| format!("S{s}")).collect())
        .expect("valid random trial")
}

/// Direct product-limit estimate of `S(t)` in `arm`, counting at-risk sets
/// from the raw records. Empty risk sets contribute a factor of one.
pub fn product_limit(ds: &TrialDataset, arm: u8, t: u32) -> f64 {
    let mut s = 1.0;
    for k in 1..=t {
        let at_risk = ds.subjects.iter().filter(|r| r.a == arm && r.u >= k).count();
        let events = ds.subjects.iter().filter(|r| r.a == arm && r.u == k && r.delta == 1).count();
        if at_risk > 0 {
            s *= 1.0 - events as f64 / at_risk as f64;
        }
    }
    s
}

/// Number at risk at `t` in `arm`.
pub fn at_risk(ds: &TrialDataset, arm: u8, t: u32) -> usize {
    ds.subjects.iter().filter(|r| r.a == arm && r.u >= t).count()
}

/// Nonparametric MLE of the event-time distribution of `arm` by maximizing
/// the censored-data likelihood over point masses on `{1, ..., T, > T}`
/// (self-consistency iterations run to a fixed point). Returns `S(1..=T)`.
pub fn npmle_survival(ds: &TrialDataset, arm: u8) -> Vec<f64> {
    let big_t = ds.horizon as usize;
    let obs: Vec<(usize, bool)> =
        ds.subjects.iter().filter(|r| r.a == arm).map(|r| (r.u as usize, r.delta == 1)).collect();
    let m = obs.len() as f64;
    // mass[j] for j = 1..=T at index j - 1; mass[T] is the tail beyond T
    let mut mass = vec![1.0 / (big_t + 1) as f64; big_t + 1];
    for _ in 0..2_000_000 {
        let mut next = vec![0.0; big_t + 1];
        for &(u, event) in &obs {
            if event {
                next[u - 1] += 1.0;
            } else {
                let tail: f64 = mass[u..].iter().sum();
                if tail > 0.0 {
                    for j in u..=big_t {
                        next[j] += mass[j] / tail;
                    }
                }
            }
        }
        for v in &mut next {
            *v /= m;
        }
        let change = next.iter().zip(&mass).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        mass = next;
        if change < 1e-16 {
            break;
        }
    }
    (1..=big_t).map(|t| mass[t..].iter().sum::<f64>()).collect()
}

/// Censored-data log-likelihood of point masses, for checking optimality.
pub fn npmle_loglik(ds: &TrialDataset, arm: u8, survival: &[f64]) -> f64 {
    let s = |t: usize| if t == 0 { 1.0 } else { survival[t - 1] };
    ds.subjects
        .iter()
        .filter(|r| r.a == arm)
        .map(|r| {
            let u = r.u as usize;
            if r.delta == 1 {
                (s(u - 1) - s(u)).ln()
            } else {
                s(u).ln()
            }
        })
        .sum()
}

pub fn intercept_only() -> NuisanceSpec {
    NuisanceSpec { learner: HazardLearner::InterceptOnly, ..NuisanceSpec::default() }
}

pub fn pooled_logistic() -> NuisanceSpec {
    NuisanceSpec { learner: HazardLearner::PooledLogistic, ..NuisanceSpec::default() }
}
