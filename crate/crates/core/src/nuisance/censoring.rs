//! Nonparametric per-arm discrete censoring hazard.

use crate::data::PersonTimeRow;

/// `hazard[a][t-1] = #censored at t / #at risk at t` within arm `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringModel {
    pub horizon: u32,
    hazard: [Vec<f64>; 2],
}

impl CensoringModel {
    pub fn fit(rows: &[PersonTimeRow], horizon: u32) -> Self {
        let t_max = horizon as usize;
        let mut at_risk = [vec![0usize; t_max], vec![0usize; t_max]];
        let mut censored = [vec![0usize; t_max], vec![0usize; t_max]];
        for r in rows {
            let k = r.t as usize - 1;
            at_risk[r.a as usize][k] += 1;
            censored[r.a as usize][k] += r.censor as usize;
        }
        let hazard = [0, 1].map(|a| {
            (0..t_max)
                .map(|k| if at_risk[a][k] == 0 { 0.0 } else { censored[a][k] as f64 / at_risk[a][k] as f64 })
                .collect()
        });
        Self { horizon, hazard }
    }

    /// `p_C(t, a)`; zero beyond the horizon.
    pub fn hazard(&self, t: u32, a: u8) -> f64 {
        self.hazard[a as usize].get(t as usize - 1).copied().unwrap_or(0.0)
    }

    /// `Pi_C(t, a) = prod_{k < t} (1 - p_C(k, a))`: the probability of still
    /// being uncensored when period `t` starts.
    pub fn survivor(&self, t: u32, a: u8) -> f64 {
        (1..t).map(|k| 1.0 - self.hazard(k, a)).product()
    }
}
