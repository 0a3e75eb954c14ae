//! Server-side aggregation and the global optimizers (SGD, momentum, Adam).
//!
//! The adaptive multipliers only rescale the aggregated gradient that feeds
//! the update numerator. Adam's second moment is always accumulated from
//! the unscaled aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptimizer {
    Sgd,
    Sgdm,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub optimizer: ServerOptimizer,
    pub eta0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_eps() -> f64 {
    1e-3
}

impl ServerConfig {
    pub fn sgd(eta0: f64) -> Self {
        Self {
            optimizer: ServerOptimizer::Sgd,
            eta0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::config("server.eta0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("server.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("server.beta2", "must be in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("server.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParamVector,
    pub config: ServerConfig,
    /// First moment (momentum and Adam).
    pub m: Option<ParamVector>,
    /// Second moment (Adam only).
    pub v: Option<ParamVector>,
    /// SCAFFOLD global control variate, when enabled.
    pub scaffold_c: Option<ParamVector>,
    /// Completed rounds.
    pub t: usize,
}

impl ServerState {
    pub fn new(theta: ParamVector, config: ServerConfig, scaffold: bool) -> Self {
        let zeros = theta.zeros_like();
        let (m, v) = match config.optimizer {
            ServerOptimizer::Sgd => (None, None),
            ServerOptimizer::Sgdm => (Some(zeros.clone()), None),
            ServerOptimizer::Adam => (Some(zeros.clone()), Some(zeros.clone())),
        };
        Self {
            theta,
            config,
            m,
            v,
            scaffold_c: scaffold.then_some(zeros),
            t: 0,
        }
    }

    /// Applies one server step with the given per-group multipliers
    /// (all 1.0 reproduces the plain optimizer).
    pub fn apply_round(&mut self, g_bar: &ParamVector, multipliers: &BTreeMap<String, f64>) -> Result<()> {
        self.theta.check_congruent(g_bar)?;
        let scaled = scale_groups(g_bar, multipliers)?;
        let cfg = &self.config;
        match cfg.optimizer {
            ServerOptimizer::Sgd => {
                self.theta.axpy_in_place(-cfg.eta0, &scaled)?;
            }
            ServerOptimizer::Sgdm => {
                let m = self.m.as_mut().expect("momentum buffer for sgdm");
                *m = m.zip_map(&scaled, |mi, gi| cfg.beta1 * mi + (1.0 - cfg.beta1) * gi)?;
                self.theta.axpy_in_place(-cfg.eta0, m)?;
            }
            ServerOptimizer::Adam => {
                let v = self.v.as_mut().expect("second moment for adam");
                *v = v.zip_map(g_bar, |vi, gi| cfg.beta2 * vi + (1.0 - cfg.beta2) * gi * gi)?;
                let m = self.m.as_mut().expect("first moment for adam");
                *m = m.zip_map(&scaled, |mi, gi| cfg.beta1 * mi + (1.0 - cfg.beta1) * gi)?;
                let step_index = (self.t + 1) as i32;
                let c1 = 1.0 - cfg.beta1.powi(step_index);
                let c2 = 1.0 - cfg.beta2.powi(step_index);
                let step = m.zip_map(v, |mi, vi| (mi / c1) / ((vi / c2).sqrt() + cfg.eps))?;
                self.theta.axpy_in_place(-cfg.eta0, &step)?;
            }
        }
        self.t += 1;
        Ok(())
    }

    /// SCAFFOLD global control-variate update:
    /// `c <- c + (sampled / total) * mean_delta_c`.
    pub fn scaffold_server_update(&mut self, mean_delta_c: &ParamVector, sampled: usize, total: usize) -> Result<()> {
        let c = self.scaffold_c.as_mut().ok_or(Error::ScaffoldDisabled)?;
        c.axpy_in_place(sampled as f64 / total as f64, mean_delta_c)
    }
}

/// Unweighted mean of client pseudo-gradients, summed in the given order.
pub fn aggregate(grads: &[ParamVector]) -> Result<ParamVector> {
    ParamVector::mean(grads)
}

/// Per-group multiplier map with every value set to 1.
pub fn unit_multipliers(params: &ParamVector) -> BTreeMap<String, f64> {
    params.group_names().map(|n| (n.to_string(), 1.0)).collect()
}

fn scale_groups(g: &ParamVector, multipliers: &BTreeMap<String, f64>) -> Result<ParamVector> {
    let mut out = g.clone();
    for group in out.groups_mut() {
        let m = *multipliers
            .get(group.name())
            .ok_or_else(|| Error::MissingMultiplier(group.name().to_string()))?;
        for v in group.values_mut() {
            *v *= m;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> ParamVector {
        ParamVector::from_flat([("g", values.to_vec())]).unwrap()
    }

    fn two_groups(a: Vec<f64>, b: Vec<f64>) -> ParamVector {
        ParamVector::from_flat([("a", a), ("b", b)]).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng) -> ParamVector {
        two_groups(
            (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Textbook optimizer step on raw flat arrays, written independently of
    /// `ParamVector` arithmetic.
    fn reference_step(
        opt: ServerOptimizer,
        cfg: &ServerConfig,
        t: usize,
        theta: &mut [f64],
        m: &mut [f64],
        v: &mut [f64],
        g: &[f64],
    ) {
        for i in 0..theta.len() {
            match opt {
                ServerOptimizer::Sgd => theta[i] -= cfg.eta0 * g[i],
                ServerOptimizer::Sgdm => {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    theta[i] -= cfg.eta0 * m[i];
                }
                ServerOptimizer::Adam => {
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32 + 1));
                    let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32 + 1));
                    theta[i] -= cfg.eta0 * (mh / (vh.sqrt() + cfg.eps));
                }
            }
        }
    }

    fn flat(p: &ParamVector) -> Vec<f64> {
        p.groups().iter().flat_map(|g| g.values().to_vec()).collect()
    }

    #[test]
    fn aggregate_examples() {
        let g = v(&[1.0, -3.0]);
        assert_eq!(aggregate(std::slice::from_ref(&g)).unwrap(), g);
        assert_eq!(aggregate(&[g.clone(), g.scale(-1.0)]).unwrap(), g.zeros_like());
        assert_eq!(aggregate(&[v(&[1.0, 2.0]), v(&[3.0, 4.0])]).unwrap(), v(&[2.0, 3.0]));
        assert!(matches!(aggregate(&[]), Err(Error::EmptyRound)));
        let other = ParamVector::from_flat([("h", vec![1.0, 2.0])]).unwrap();
        assert!(matches!(aggregate(&[g, other]), Err(Error::IncongruentShapes(_))));
    }

    #[test]
    fn aggregate_sums_in_given_order() {
        let gs = [v(&[1e16]), v(&[1.0]), v(&[-1e16])];
        let manual = ((1e16 + 1.0) + -1e16) / 3.0;
        assert_eq!(aggregate(&gs).unwrap().groups()[0].values()[0], manual);
    }

    #[test]
    fn sgd_unit_step_subtracts_gradient() {
        let theta = v(&[1.0, 2.0]);
        let g = v(&[0.25, -0.5]);
        let mut st = ServerState::new(theta.clone(), ServerConfig::sgd(1.0), false);
        st.apply_round(&g, &unit_multipliers(&theta)).unwrap();
        assert_eq!(st.theta, v(&[0.75, 2.5]));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn missing_multiplier() {
        let theta = two_groups(vec![1.0], vec![2.0]);
        let mut st = ServerState::new(theta.clone(), ServerConfig::sgd(1.0), false);
        let partial = BTreeMap::from([("a".to_string(), 1.0)]);
        assert!(matches!(st.apply_round(&theta, &partial), Err(Error::MissingMultiplier(_))));
    }

    #[test]
    fn adam_second_moment_ignores_multipliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_vec(&mut rng);
        let cfg = ServerConfig { optimizer: ServerOptimizer::Adam, ..ServerConfig::sgd(0.1) };
        let mut half = ServerState::new(theta.clone(), cfg.clone(), false);
        let mut full = ServerState::new(theta.clone(), cfg, false);
        let halves: BTreeMap<_, _> = theta.group_names().map(|n| (n.to_string(), 0.5)).collect();
        let g = random_vec(&mut rng);
        half.apply_round(&g, &halves).unwrap();
        full.apply_round(&g, &unit_multipliers(&theta)).unwrap();
        assert_eq!(half.v, full.v);
        assert_ne!(half.m, full.m);
    }

    #[test]
    fn sgdm_without_momentum_is_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_vec(&mut rng);
        let mults: BTreeMap<_, _> = [("a".to_string(), 0.8), ("b".to_string(), 1.2)].into();
        let mut sgdm = ServerState::new(
            theta.clone(),
            ServerConfig { optimizer: ServerOptimizer::Sgdm, beta1: 0.0, ..ServerConfig::sgd(0.7) },
            false,
        );
        let mut sgd = ServerState::new(theta, ServerConfig::sgd(0.7), false);
        for _ in 0..5 {
            let g = random_vec(&mut rng);
            sgdm.apply_round(&g, &mults).unwrap();
            sgd.apply_round(&g, &mults).unwrap();
        }
        for (a, b) in flat(&sgdm.theta).iter().zip(flat(&sgd.theta)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_multipliers_match_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for opt in [ServerOptimizer::Sgd, ServerOptimizer::Sgdm, ServerOptimizer::Adam] {
            for _ in 0..10 {
                let cfg = ServerConfig {
                    optimizer: opt,
                    eta0: rng.random_range(0.01..2.0),
                    beta1: rng.random_range(0.0..0.99),
                    beta2: rng.random_range(0.5..0.999),
                    eps: 1e-3,
                };
                let theta = random_vec(&mut rng);
                let mut st = ServerState::new(theta.clone(), cfg.clone(), false);
                let (mut rt, mut rm, mut rv) = (flat(&theta), vec![0.0; 8], vec![0.0; 8]);
                for t in 0..4 {
                    let g = random_vec(&mut rng);
                    st.apply_round(&g, &unit_multipliers(&theta)).unwrap();
                    reference_step(opt, &cfg, t, &mut rt, &mut rm, &mut rv, &flat(&g));
                }
                let got: Vec<u64> = flat(&st.theta).iter().map(|x| x.to_bits()).collect();
                let want: Vec<u64> = rt.iter().map(|x| x.to_bits()).collect();
                assert_eq!(got, want, "{opt:?}");
            }
        }
    }

    #[test]
    fn scaffold_update_weighting() {
        let theta = v(&[0.0, 0.0]);
        let mut st = ServerState::new(theta.clone(), ServerConfig::sgd(1.0), true);
        st.scaffold_server_update(&theta.zeros_like(), 3, 10).unwrap();
        assert_eq!(st.scaffold_c.as_ref().unwrap(), &theta.zeros_like());
        let d = v(&[1.0, -2.0]);
        st.scaffold_server_update(&d, 10, 10).unwrap();
        assert_eq!(st.scaffold_c.as_ref().unwrap(), &d);
        let mut st = ServerState::new(theta.clone(), ServerConfig::sgd(1.0), true);
        st.scaffold_server_update(&d, 1, 10).unwrap();
        assert_eq!(st.scaffold_c.as_ref().unwrap(), &v(&[0.1, -0.2]));

        let mut off = ServerState::new(theta, ServerConfig::sgd(1.0), false);
        assert!(matches!(off.scaffold_server_update(&d, 1, 10), Err(Error::ScaffoldDisabled)));
    }

    proptest! {
        #[test]
        fn adam_v_depends_only_on_aggregate(
            seed in any::<u64>(),
            mults in prop::collection::vec((0.01f64..3.0, 0.01f64..3.0), 1..10),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_vec(&mut rng);
            let cfg = ServerConfig { optimizer: ServerOptimizer::Adam, ..ServerConfig::sgd(0.3) };
            let mut scaled = ServerState::new(theta.clone(), cfg.clone(), false);
            let mut plain = ServerState::new(theta.clone(), cfg, false);
            for (ma, mb) in mults {
                let g = random_vec(&mut rng);
                let m = BTreeMap::from([("a".to_string(), ma), ("b".to_string(), mb)]);
                scaled.apply_round(&g, &m).unwrap();
                plain.apply_round(&g, &unit_multipliers(&theta)).unwrap();
                prop_assert_eq!(&scaled.v, &plain.v);
            }
        }
    }
}
