//! Plug-in functionals of the survival curves and their delta-method
//! influence functions.
//!
//! Every functional is handled through its gradient with respect to the
//! targeted `S(t, a)`, so the influence function is the matching linear
//! combination of the per-time influence functions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Inference;
use crate::tmle::{variance_pair, TargetedFit};

const UNDEFINED_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimandKind {
    /// `S(t*, arm)`.
    Survival { arm: u8 },
    /// Risk difference `S(t*, 1) - S(t*, 0)`.
    Rd,
    /// Restricted mean survival time difference up to `tau`.
    Rmst,
    /// `S(t*, 1) / S(t*, 0)`.
    Rr,
    /// Survival odds ratio.
    Or,
    /// Win ratio up to `tau`.
    Wr,
}

impl EstimandKind {
    pub fn label(&self) -> String {
        match self {
            Self::Survival { arm } => format!("survival{arm}"),
            Self::Rd => "rd".into(),
            Self::Rmst => "rmst".into(),
            Self::Rr => "rr".into(),
            Self::Or => "or".into(),
            Self::Wr => "wr".into(),
        }
    }

    pub fn is_ratio(&self) -> bool {
        matches!(self, Self::Rr | Self::Or | Self::Wr)
    }

    pub fn default_null(&self) -> f64 {
        if self.is_ratio() {
            1.0
        } else {
            0.0
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    #[serde(flatten)]
    pub kind: EstimandKind,
    /// `t*`, or the horizon `tau` for RMST and WR.
    pub time: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Defaults to 0 for differences and 1 for ratios.
    #[serde(default)]
    pub null: Option<f64>,
}

impl EstimandSpec {
    pub fn new(kind: EstimandKind, time: u32) -> Self {
        Self { kind, time, alpha: 0.05, null: None }
    }

    pub fn null_value(&self) -> f64 {
        self.null.unwrap_or_else(|| self.kind.default_null())
    }

    /// Target times the fit must contain.
    pub fn required_times(&self) -> Vec<u32> {
        match self.kind {
            EstimandKind::Rmst | EstimandKind::Wr => (1..=self.time).collect(),
            _ => vec![self.time],
        }
    }

    /// Value and gradient `[(t, a, dg/dS(t, a))]` of the functional at the
    /// curves given by `s`, where `s(0, a)` must be 1.
    pub fn value_and_gradient(&self, s: impl Fn(u32, u8) -> f64) -> Result<(f64, Vec<(u32, u8, f64)>)> {
        let t = self.time;
        if t == 0 {
            return Err(Error::Argument("estimand time must be at least 1".into()));
        }
        Ok(match self.kind {
            EstimandKind::Survival { arm } => {
                if arm > 1 {
                    return Err(Error::Argument(format!("arm must be 0 or 1, got {arm}")));
                }
                (s(t, arm), vec![(t, arm, 1.0)])
            }
            EstimandKind::Rd => (s(t, 1) - s(t, 0), vec![(t, 1, 1.0), (t, 0, -1.0)]),
            EstimandKind::Rmst => {
                let value = (1..=t).map(|k| s(k, 1) - s(k, 0)).sum();
                (value, (1..=t).flat_map(|k| [(k, 1, 1.0), (k, 0, -1.0)]).collect())
            }
            EstimandKind::Rr => {
                let (s1, s0) = (s(t, 1), s(t, 0));
                if s0 < UNDEFINED_TOL {
                    return Err(Error::UndefinedEstimand(format!("risk ratio with S({t}, 0) = {s0:e}")));
                }
                (s1 / s0, vec![(t, 1, 1.0 / s0), (t, 0, -s1 / (s0 * s0))])
            }
            EstimandKind::Or => {
                let (s1, s0) = (s(t, 1), s(t, 0));
                if s0 < UNDEFINED_TOL || 1.0 - s1 < UNDEFINED_TOL {
                    return Err(Error::UndefinedEstimand(format!(
                        "odds ratio with S({t}, 0) = {s0:e}, 1 - S({t}, 1) = {:e}",
                        1.0 - s1
                    )));
                }
                let value = (s1 / (1.0 - s1)) / (s0 / (1.0 - s0));
                let d1 = (1.0 - s0) / (s0 * (1.0 - s1).powi(2));
                let d0 = -s1 / (s0 * s0 * (1.0 - s1));
                (value, vec![(t, 1, d1), (t, 0, d0)])
            }
            EstimandKind::Wr => {
                let (w, dw) = win_probability(&s, t, 1);
                let (l, dl) = win_probability(&s, t, 0);
                if l < UNDEFINED_TOL {
                    return Err(Error::UndefinedEstimand(format!("win ratio with loss probability {l:e}")));
                }
                let mut grad = Vec::with_capacity(dw.len());
                for ((tk, ak, gw), (_, _, gl)) in dw.into_iter().zip(dl) {
                    grad.push((tk, ak, gw / l - w * gl / (l * l)));
                }
                (w / l, grad)
            }
        })
    }
}

/// `P(T_winner > T_loser, T_loser <= tau)` as
/// `sum_{t <= tau} S(t, winner) (S(t-1, loser) - S(t, loser))`, with its
/// gradient over `(t, a)` for `t = 1..=tau`, `a = 0, 1` in that order.
/// Ties fall in neither wins nor losses.
fn win_probability(s: &impl Fn(u32, u8) -> f64, tau: u32, winner: u8) -> (f64, Vec<(u32, u8, f64)>) {
    let loser = 1 - winner;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(2 * tau as usize);
    for t in 1..=tau {
        value += s(t, winner) * (s(t - 1, loser) - s(t, loser));
        let d_winner = s(t - 1, loser) - s(t, loser);
        let next = if t < tau { s(t + 1, winner) } else { 0.0 };
        let d_loser = next - s(t, winner);
        let (d0, d1) = if winner == 1 { (d_loser, d_winner) } else { (d_winner, d_loser) };
        grad.push((t, 0, d0));
        grad.push((t, 1, d1));
    }
    (value, grad)
}

impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.label(), self.time)
    }
}

/// Parses `kind:time`, with kind one of `survival0`, `survival1`, `rd`,
/// `rmst`, `rr`, `or`, `wr`.
impl FromStr for EstimandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, time) =
            s.split_once(':').ok_or_else(|| Error::Argument(format!("estimand `{s}` is not of the form kind:time")))?;
        let time: u32 = time.trim().parse().map_err(|_| Error::Argument(format!("bad estimand time in `{s}`")))?;
        let kind = match kind.trim().to_ascii_lowercase().as_str() {
            "survival0" => EstimandKind::Survival { arm: 0 },
            "survival1" => EstimandKind::Survival { arm: 1 },
            "rd" => EstimandKind::Rd,
            "rmst" => EstimandKind::Rmst,
            "rr" => EstimandKind::Rr,
            "or" => EstimandKind::Or,
            "wr" => EstimandKind::Wr,
            other => return Err(Error::Argument(format!("unknown estimand kind `{other}`"))),
        };
        if time == 0 {
            return Err(Error::Argument("estimand time must be at least 1".into()));
        }
        Ok(Self::new(kind, time))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimandResult {
    pub estimand: String,
    pub time: u32,
    pub estimate: f64,
    /// Inference under simple randomization.
    pub simple: Inference,
    /// Inference under stratified randomization.
    pub stratified: Inference,
    pub correction: f64,
    pub floored: bool,
    /// Natural-scale Wald inference for ratio estimands, simple then
    /// stratified; the headline intervals of ratios are built on the log scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub natural_scale: Option<[Inference; 2]>,
    /// Per-arm RMST for RMST estimands, arm 0 first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmst_by_arm: Option<[f64; 2]>,
    #[serde(skip)]
    pub if_values: Vec<f64>,
}

/// Plug-in value of the functional.
pub fn functional_value(fit: &TargetedFit, spec: &EstimandSpec) -> Result<f64> {
    check_times(fit, spec)?;
    Ok(spec.value_and_gradient(|t, a| fit.survival(t, a).unwrap_or(f64::NAN))?.0)
}

fn check_times(fit: &TargetedFit, spec: &EstimandSpec) -> Result<()> {
    for t in spec.required_times() {
        for a in 0..2 {
            fit.survival(t, a)?;
        }
    }
    Ok(())
}

/// Point estimate, influence values and both variance flavors.
pub fn estimate(fit: &TargetedFit, spec: &EstimandSpec) -> Result<EstimandResult> {
    check_times(fit, spec)?;
    let (value, grad) = spec.value_and_gradient(|t, a| fit.survival(t, a).unwrap_or(f64::NAN))?;
    let (if_values, vp) = variance_pair(fit, &grad)?;
    let null = spec.null_value();
    let infer = |v: f64| {
        if spec.kind.is_ratio() {
            Inference::log_scale(value, v, fit.n, spec.alpha, null)
        } else {
            Inference::wald(value, v, fit.n, spec.alpha, null)
        }
    };
    let natural_scale = spec.kind.is_ratio().then(|| {
        [vp.v_simple, vp.v_stratified].map(|v| Inference::wald(value, v, fit.n, spec.alpha, null))
    });
    let rmst_by_arm = matches!(spec.kind, EstimandKind::Rmst).then(|| {
        [0u8, 1].map(|a| (1..=spec.time).map(|t| fit.survival(t, a).unwrap_or(f64::NAN)).sum::<f64>())
    });
    Ok(EstimandResult {
        estimand: spec.kind.label(),
        time: spec.time,
        estimate: value,
        simple: infer(vp.v_simple),
        stratified: infer(vp.v_stratified),
        correction: vp.correction,
        floored: vp.floored,
        natural_scale,
        rmst_by_arm,
        if_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curves(s1: Vec<f64>, s0: Vec<f64>) -> impl Fn(u32, u8) -> f64 {
        move |t, a| {
            if t == 0 {
                1.0
            } else if a == 1 {
                s1[t as usize - 1]
            } else {
                s0[t as usize - 1]
            }
        }
    }

    fn decreasing(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.6f64..0.98, len).prop_map(|hs| {
            let mut s = 1.0;
            hs.into_iter()
                .map(|q| {
                    s *= q;
                    s
                })
                .collect()
        })
    }

    #[test]
    fn trivial_values() {
        let s = curves(vec![0.7, 0.5], vec![0.7, 0.5]);
        for (kind, want) in [(EstimandKind::Rd, 0.0), (EstimandKind::Rr, 1.0), (EstimandKind::Or, 1.0), (EstimandKind::Wr, 1.0)] {
            assert_eq!(EstimandSpec::new(kind, 2).value_and_gradient(&s).unwrap().0, want);
        }
        let s = curves(vec![1.0; 4], vec![0.5; 4]);
        assert_eq!(EstimandSpec::new(EstimandKind::Rmst, 4).value_and_gradient(&s).unwrap().0, 2.0);
    }

    #[test]
    fn win_probability_by_enumeration() {
        // T1 on {1, 2, 3, >3} and T0 likewise; count strict wins directly
        let p1 = [0.2, 0.3, 0.1, 0.4];
        let p0 = [0.4, 0.1, 0.3, 0.2];
        let surv = |p: &[f64; 4]| (1..=3).map(|t| p[t..].iter().sum::<f64>()).collect::<Vec<_>>();
        let s = curves(surv(&p1), surv(&p0));
        let mut win = 0.0;
        let mut loss = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                // index 3 means beyond tau; no comparison is decided there
                if j < 3 && i > j {
                    win += p1[i] * p0[j];
                }
                if i < 3 && j > i {
                    loss += p1[i] * p0[j];
                }
            }
        }
        let wr = EstimandSpec::new(EstimandKind::Wr, 3).value_and_gradient(&s).unwrap().0;
        assert!((wr - win / loss).abs() < 1e-12);
    }

    #[test]
    fn undefined_ratios() {
        let s = curves(vec![1.0], vec![0.0]);
        for kind in [EstimandKind::Rr, EstimandKind::Or] {
            assert!(matches!(EstimandSpec::new(kind, 1).value_and_gradient(&s), Err(Error::UndefinedEstimand(_))));
        }
        let s = curves(vec![1.0], vec![1.0]);
        assert!(matches!(
            EstimandSpec::new(EstimandKind::Wr, 1).value_and_gradient(&s),
            Err(Error::UndefinedEstimand(_))
        ));
    }

    #[test]
    fn parse_round_trip() {
        for s in ["rd:3", "rmst:4", "survival1:2", "wr:4", "or:1", "rr:3", "survival0:1"] {
            assert_eq!(s.parse::<EstimandSpec>().unwrap().to_string(), s);
        }
        assert!("hr:3".parse::<EstimandSpec>().is_err());
        assert!("rd:0".parse::<EstimandSpec>().is_err());
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(s1 in decreasing(4), s0 in decreasing(4), which in 0usize..6) {
            let kind = [
                EstimandKind::Survival { arm: 1 },
                EstimandKind::Rd,
                EstimandKind::Rmst,
                EstimandKind::Rr,
                EstimandKind::Or,
                EstimandKind::Wr,
            ][which];
            let spec = EstimandSpec::new(kind, 4);
            let (_, grad) = spec.value_and_gradient(curves(s1.clone(), s0.clone())).unwrap();
            let h = 1e-6;
            for &(t, a, g) in &grad {
                let bump = |d: f64| {
                    let (mut p1, mut p0) = (s1.clone(), s0.clone());
                    if a == 1 { p1[t as usize - 1] += d } else { p0[t as usize - 1] += d }
                    spec.value_and_gradient(curves(p1, p0)).unwrap().0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                prop_assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "t={t} a={a} fd={fd} g={g}");
            }
        }
    }
}
