//! Gradient-similarity-aware server learning-rate adaptation.
//!
//! Each round the server measures how much the uploaded pseudo-gradients
//! disagree:
//!
//! ```text
//! GSI_P = sqrt( sum_k |g_{P,k}|^2 / (r * |mean_k g_{P,k}|^2) )
//! ```
//!
//! `GSI_P` is 1 when all clients agree and grows as their directions
//! diverge. The ratio of the current GSI to an exponential moving baseline
//! `B_P` (estimating the full-participation value) becomes the
//! per-group multiplier on the server step, clamped to `[1 - γt, 1 + γt]`:
//!
//! ```text
//! m_P   = min(max(GSI_P / B_P, 1 - γt), 1 + γt)
//! B_P  <- β B_P + (1 - β) GSI_P
//! ```
//!
//! `B_P` is initialized to the first observed GSI, so round 0 always
//! yields a multiplier of exactly 1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{ParamVector, ALL_GROUPS};

/// Aggregate squared norms below this are treated as cancelled out.
pub const DEGENERATE_SQ_NORM: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// One multiplier per parameter group.
    Groupwise,
    /// One multiplier for the whole model, keyed by [`ALL_GROUPS`].
    Universal,
}

/// GSI measured in one round, before it is compared with the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GsiObservation {
    pub gsi: BTreeMap<String, f64>,
    /// Keys whose aggregate gradient vanished; they carry no GSI value.
    pub degenerate: BTreeSet<String>,
}

impl GsiObservation {
    pub fn keys(&self) -> BTreeSet<String> {
        self.gsi.keys().chain(&self.degenerate).cloned().collect()
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.gsi.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundGsiReport {
    pub gsi: BTreeMap<String, f64>,
    pub multiplier: BTreeMap<String, f64>,
    pub raw_ratio: BTreeMap<String, f64>,
    pub degenerate_groups: BTreeSet<String>,
}

impl RoundGsiReport {
    /// Multiplier for every parameter group of `params`; in universal mode the
    /// single whole-model value is broadcast to each group.
    pub fn group_multipliers(&self, params: &ParamVector) -> Result<BTreeMap<String, f64>> {
        params
            .group_names()
            .map(|name| {
                self.multiplier
                    .get(name)
                    .or_else(|| self.multiplier.get(ALL_GROUPS))
                    .map(|&m| (name.to_string(), m))
                    .ok_or_else(|| Error::MissingMultiplier(name.to_string()))
            })
            .collect()
    }
}

fn keys_for(mode: AdaptMode, g_bar: &ParamVector) -> Vec<String> {
    match mode {
        AdaptMode::Groupwise => g_bar.group_names().map(str::to_string).collect(),
        AdaptMode::Universal => vec![ALL_GROUPS.to_string()],
    }
}

/// Measures GSI per key from the clients' squared norms (as produced by
/// [`crate::client::pseudo_grad_sq_norms`]) and the aggregated gradient.
pub fn compute_gsi(
    per_client_sq_norms: &[BTreeMap<String, f64>],
    g_bar: &ParamVector,
    mode: AdaptMode,
) -> Result<GsiObservation> {
    if per_client_sq_norms.is_empty() {
        return Err(Error::NoClients);
    }
    let r = per_client_sq_norms.len() as f64;
    let mut obs = GsiObservation {
        gsi: BTreeMap::new(),
        degenerate: BTreeSet::new(),
    };
    for key in keys_for(mode, g_bar) {
        let agg = if key == ALL_GROUPS {
            g_bar.sq_norm()
        } else {
            g_bar.group_sq_norm(&key)?
        };
        let mut sum = 0.0;
        for norms in per_client_sq_norms {
            let n = *norms
                .get(&key)
                .ok_or_else(|| Error::KeyMismatch(format!("client norms lack `{key}`")))?;
            sum += n;
        }
        if agg < DEGENERATE_SQ_NORM {
            obs.degenerate.insert(key);
        } else {
            obs.gsi.insert(key, (sum / (r * agg)).sqrt());
        }
    }
    Ok(obs)
}

/// Whole-model GSI, treating all parameters as one group. `None` when the
/// aggregate gradient vanished.
pub fn whole_model_gsi(per_client_sq_norms: &[BTreeMap<String, f64>], g_bar: &ParamVector) -> Result<Option<f64>> {
    Ok(compute_gsi(per_client_sq_norms, g_bar, AdaptMode::Universal)?.get(ALL_GROUPS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsiState {
    mode: AdaptMode,
    beta: f64,
    gamma: f64,
    baseline: BTreeMap<String, f64>,
    keys: Option<BTreeSet<String>>,
    t: usize,
}

impl GsiState {
    pub fn new(mode: AdaptMode, beta: f64, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config("fedglad.beta", "must be in [0, 1)"));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config("fedglad.gamma", "must be non-negative"));
        }
        Ok(Self {
            mode,
            beta,
            gamma,
            baseline: BTreeMap::new(),
            keys: None,
            t: 0,
        })
    }

    pub fn mode(&self) -> AdaptMode {
        self.mode
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn baseline(&self) -> &BTreeMap<String, f64> {
        &self.baseline
    }

    /// `(lower, upper)` clamp for the current round.
    pub fn bounds(&self) -> (f64, f64) {
        let span = self.gamma * self.t as f64;
        (1.0 - span, 1.0 + span)
    }

    #[cfg(test)]
    pub(crate) fn with_baseline(mut self, t: usize, baseline: BTreeMap<String, f64>) -> Self {
        self.keys = Some(baseline.keys().cloned().collect());
        self.baseline = baseline;
        self.t = t;
        self
    }

    /// Turns this round's GSI into multipliers and advances the baseline.
    pub fn step(&mut self, obs: &GsiObservation) -> Result<RoundGsiReport> {
        let keys = obs.keys();
        if self.mode == AdaptMode::Universal && (keys.len() != 1 || !keys.contains(ALL_GROUPS)) {
            return Err(Error::KeyMismatch(format!(
                "universal mode expects only `{ALL_GROUPS}`, got {keys:?}"
            )));
        }
        match &self.keys {
            Some(expected) if *expected != keys => {
                return Err(Error::KeyMismatch(format!("expected {expected:?}, got {keys:?}")));
            }
            Some(_) => {}
            None => self.keys = Some(keys.clone()),
        }

        let (lo, hi) = self.bounds();
        let mut report = RoundGsiReport {
            gsi: BTreeMap::new(),
            multiplier: BTreeMap::new(),
            raw_ratio: BTreeMap::new(),
            degenerate_groups: obs.degenerate.clone(),
        };
        for key in keys {
            let (gsi, ratio) = match obs.get(&key) {
                Some(gsi) => {
                    let b = *self.baseline.entry(key.clone()).or_insert(gsi);
                    let ratio = gsi / b;
                    self.baseline
                        .insert(key.clone(), self.beta * b + (1.0 - self.beta) * gsi);
                    (gsi, ratio)
                }
                // cancelled aggregate: report the baseline, keep it frozen
                None => (self.baseline.get(&key).copied().unwrap_or(1.0), 1.0),
            };
            report.gsi.insert(key.clone(), gsi);
            report.raw_ratio.insert(key.clone(), ratio);
            report.multiplier.insert(key, ratio.max(lo).min(hi));
        }
        self.t += 1;
        Ok(report)
    }
}

/// Least-squares optimal server step size when the full-participation
/// gradient is known: `eta_s * <g_bar, g_full> / |g_bar|^2`.
pub fn optimal_lr_oracle(g_bar: &ParamVector, g_full: &ParamVector, eta_s: f64) -> Result<f64> {
    let denom = g_bar.sq_norm();
    let dot = g_bar.dot(g_full)?;
    if denom == 0.0 {
        return Err(Error::ZeroAggregateGradient);
    }
    Ok(eta_s * dot / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::pseudo_grad_sq_norms;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> ParamVector {
        ParamVector::from_flat([("w", values.to_vec())]).unwrap()
    }

    fn gsi_of(grads: &[ParamVector], mode: AdaptMode) -> GsiObservation {
        let norms: Vec<_> = grads.iter().map(pseudo_grad_sq_norms).collect();
        let g_bar = ParamVector::mean(grads).unwrap();
        compute_gsi(&norms, &g_bar, mode).unwrap()
    }

    #[test]
    fn identical_gradients_give_one() {
        let g = ParamVector::from_flat([("a", vec![0.3, -1.2, 4.0]), ("b", vec![2.0])]).unwrap();
        let obs = gsi_of(&[g.clone(), g.clone(), g], AdaptMode::Groupwise);
        for val in obs.gsi.values() {
            assert!((val - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_orthogonal_units() {
        let obs = gsi_of(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])], AdaptMode::Groupwise);
        assert!((obs.gsi["w"] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_family_gives_sqrt_r() {
        for r in 1..=12 {
            let grads: Vec<_> = (0..r)
                .map(|i| {
                    let mut e = vec![0.0; r];
                    e[i] = 1.0;
                    v(&e)
                })
                .collect();
            let obs = gsi_of(&grads, AdaptMode::Universal);
            assert!((obs.gsi[ALL_GROUPS] - (r as f64).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn cancelled_aggregate_is_degenerate() {
        let obs = gsi_of(&[v(&[1.0, 2.0]), v(&[-1.0, -2.0])], AdaptMode::Groupwise);
        assert!(obs.gsi.is_empty());
        assert!(obs.degenerate.contains("w"));

        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.02).unwrap();
        let warm = gsi_of(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])], AdaptMode::Groupwise);
        st.step(&warm).unwrap();
        let b = st.baseline()["w"];
        let rep = st.step(&obs).unwrap();
        assert_eq!(rep.gsi["w"], b);
        assert_eq!(rep.raw_ratio["w"], 1.0);
        assert_eq!(rep.multiplier["w"], 1.0);
        assert_eq!(st.baseline()["w"], b);
    }

    #[test]
    fn no_clients() {
        assert!(matches!(compute_gsi(&[], &v(&[1.0]), AdaptMode::Groupwise), Err(Error::NoClients)));
    }

    #[test]
    fn first_round_multiplier_is_one() {
        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.5).unwrap();
        let obs = gsi_of(&[v(&[1.0, 0.0]), v(&[0.3, 1.0])], AdaptMode::Groupwise);
        let rep = st.step(&obs).unwrap();
        assert_eq!(rep.multiplier["w"], 1.0);
        assert_eq!(st.round(), 1);
    }

    #[test]
    fn zero_gamma_pins_multiplier() {
        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.0).unwrap();
        for i in 0..30 {
            let x = 0.1 * i as f64;
            let obs = gsi_of(&[v(&[1.0, x]), v(&[x.sin(), 1.0]), v(&[-x, 0.2])], AdaptMode::Groupwise);
            assert_eq!(st.step(&obs).unwrap().multiplier["w"], 1.0);
        }
    }

    #[test]
    fn worked_example() {
        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.02)
            .unwrap()
            .with_baseline(5, BTreeMap::from([("w".to_string(), 2.0)]));
        let obs = GsiObservation {
            gsi: BTreeMap::from([("w".to_string(), 2.6)]),
            degenerate: BTreeSet::new(),
        };
        let rep = st.step(&obs).unwrap();
        assert!((rep.raw_ratio["w"] - 1.3).abs() < 1e-12);
        assert!((rep.multiplier["w"] - 1.1).abs() < 1e-12);
        assert!((st.baseline()["w"] - 2.06).abs() < 1e-12);
    }

    #[test]
    fn constant_gsi_converges() {
        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.02)
            .unwrap()
            .with_baseline(1, BTreeMap::from([("w".to_string(), 3.0)]));
        let obs = GsiObservation {
            gsi: BTreeMap::from([("w".to_string(), 1.5)]),
            degenerate: BTreeSet::new(),
        };
        let mut last = 0.0;
        for _ in 0..300 {
            last = st.step(&obs).unwrap().multiplier["w"];
        }
        // B - c shrinks by a factor beta per round
        assert!((st.baseline()["w"] - 1.5).abs() < 1.5 * 0.9f64.powi(300) + 1e-12);
        assert!((last - 1.0).abs() < 1e-9);
    }

    #[test]
    fn key_mismatch() {
        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.02).unwrap();
        st.step(&gsi_of(&[v(&[1.0]), v(&[2.0])], AdaptMode::Groupwise)).unwrap();
        let other = ParamVector::from_flat([("u", vec![1.0])]).unwrap();
        let obs = gsi_of(&[other.clone(), other], AdaptMode::Groupwise);
        assert!(matches!(st.step(&obs), Err(Error::KeyMismatch(_))));

        let mut uni = GsiState::new(AdaptMode::Universal, 0.9, 0.02).unwrap();
        let obs = gsi_of(&[v(&[1.0]), v(&[2.0])], AdaptMode::Groupwise);
        assert!(matches!(uni.step(&obs), Err(Error::KeyMismatch(_))));
    }

    #[test]
    fn identical_round_never_amplifies_after_warmup() {
        let mut st = GsiState::new(AdaptMode::Groupwise, 0.9, 0.05).unwrap();
        for i in 0..10 {
            let x = i as f64;
            st.step(&gsi_of(&[v(&[1.0, x]), v(&[-x, 1.0])], AdaptMode::Groupwise)).unwrap();
        }
        let b = st.baseline()["w"];
        assert!(b >= 1.0);
        let (lo, hi) = st.bounds();
        let same = v(&[0.4, 0.7]);
        let rep = st.step(&gsi_of(&[same.clone(), same.clone(), same], AdaptMode::Groupwise)).unwrap();
        let expected = (1.0 / b).max(lo).min(hi);
        assert!((rep.multiplier["w"] - expected).abs() < 1e-12);
        assert!(rep.multiplier["w"] <= 1.0);
    }

    #[test]
    fn oracle_examples() {
        let g = v(&[0.5, -2.0]);
        assert!((optimal_lr_oracle(&g, &g, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(optimal_lr_oracle(&v(&[2.0, 0.0]), &v(&[1.0, 1.0]), 1.0).unwrap(), 0.5);
        assert_eq!(optimal_lr_oracle(&v(&[1.0, 0.0]), &v(&[0.0, 3.0]), 1.0).unwrap(), 0.0);
        assert!(matches!(
            optimal_lr_oracle(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]), 1.0),
            Err(Error::ZeroAggregateGradient)
        ));
    }

    fn arb_round() -> impl Strategy<Value = Vec<ParamVector>> {
        (1usize..8, 1usize..6).prop_flat_map(|(r, d)| {
            prop::collection::vec(
                (prop::collection::vec(-10f64..10.0, d), prop::collection::vec(-10f64..10.0, 2)),
                r,
            )
            .prop_map(|gs| {
                gs.into_iter()
                    .map(|(a, b)| ParamVector::from_flat([("a", a), ("b", b)]).unwrap())
                    .collect()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn gsi_at_least_one(grads in arb_round()) {
            for mode in [AdaptMode::Groupwise, AdaptMode::Universal] {
                for val in gsi_of(&grads, mode).gsi.values() {
                    prop_assert!(*val >= 1.0 - 1e-9, "gsi {}", val);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn gsi_scale_invariant(grads in arb_round()) {
            let base = gsi_of(&grads, AdaptMode::Groupwise);
            for c in [1e-6, 1.0, 1e6] {
                let scaled: Vec<_> = grads.iter().map(|g| g.scale(c)).collect();
                let obs = gsi_of(&scaled, AdaptMode::Groupwise);
                for (k, val) in &base.gsi {
                    if let Some(s) = obs.gsi.get(k) {
                        prop_assert!((s - val).abs() <= 1e-9 * val);
                    }
                }
            }
        }

        #[test]
        fn multipliers_within_bounds(
            gsis in prop::collection::vec(1.0f64..20.0, 1..60),
            gamma in 0.0f64..0.2,
        ) {
            let mut st = GsiState::new(AdaptMode::Universal, 0.9, gamma).unwrap();
            for g in gsis {
                let (lo, hi) = st.bounds();
                let obs = GsiObservation {
                    gsi: BTreeMap::from([(ALL_GROUPS.to_string(), g)]),
                    degenerate: BTreeSet::new(),
                };
                let m = st.step(&obs).unwrap().multiplier[ALL_GROUPS];
                prop_assert!(m >= lo && m <= hi && m > 0.0);
                prop_assert!(st.baseline()[ALL_GROUPS] >= 1.0);
            }
        }

        #[test]
        fn single_group_universal_matches_groupwise(grads in prop::collection::vec(prop::collection::vec(-5f64..5.0, 3), 1..6)) {
            let grads: Vec<_> = grads.into_iter().map(|g| v(&g)).collect();
            let mut gw = GsiState::new(AdaptMode::Groupwise, 0.9, 0.02).unwrap();
            let mut un = GsiState::new(AdaptMode::Universal, 0.9, 0.02).unwrap();
            for _ in 0..3 {
                let a = gw.step(&gsi_of(&grads, AdaptMode::Groupwise)).unwrap();
                let b = un.step(&gsi_of(&grads, AdaptMode::Universal)).unwrap();
                prop_assert_eq!(a.multiplier["w"].to_bits(), b.multiplier[ALL_GROUPS].to_bits());
            }
        }
    }
}
