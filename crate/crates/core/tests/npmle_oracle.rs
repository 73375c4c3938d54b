mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use strat_tte::nuisance::fit_nuisances;
use strat_tte::tmle::{tmle_survival_curve, TmleConfig};

use common::{at_risk, intercept_only, npmle_loglik, npmle_survival, random_trial};

#[test]
fn saturated_tmle_matches_exhaustive_npmle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = TmleConfig::default();
    let mut compared = 0;
    for _ in 0..200 {
        let horizon = rng.gen_range(1..=3);
        let n_strata = rng.gen_range(1..=2);
        let n = rng.gen_range(2 * n_strata..=6);
        let ds = random_trial(&mut rng, n, horizon, n_strata, 0.35);
        let times: Vec<u32> = (1..=horizon).collect();
        // a constant design propensity keeps the clever covariate constant within (t, a)
        let p = Some(ds.treated_fraction());
        let bundle = fit_nuisances(&ds, &intercept_only(), p).unwrap();
        let fit = tmle_survival_curve(&ds, &bundle, &times, &cfg, p).unwrap();
        for a in 0..2u8 {
            let oracle = npmle_survival(&ds, a);
            let ours: Vec<f64> = times.iter().map(|&t| fit.survival(t, a).unwrap()).collect();
            // the TMLE curve is itself a maximizer of the censored likelihood
            let ll_oracle = npmle_loglik(&ds, a, &oracle);
            let ll_ours = npmle_loglik(&ds, a, &ours);
            assert!(ll_ours >= ll_oracle - 1e-9 || ll_oracle == f64::NEG_INFINITY, "{ll_ours} < {ll_oracle}");
            for &t in &times {
                // beyond the last risk set the NPMLE is not identified
                let identified = at_risk(&ds, a, t) > 0 || oracle[t as usize - 2] < 1e-12;
                if identified {
                    let d = (ours[t as usize - 1] - oracle[t as usize - 1]).abs();
                    assert!(d < 1e-8, "t = {t}, arm {a}: {} vs {}", ours[t as usize - 1], oracle[t as usize - 1]);
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 500);
}
