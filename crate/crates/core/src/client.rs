//! Client-side local training. A client starts from the broadcast global
//! model, runs `E` epochs of shuffled minibatch steps and uploads the
//! pseudo-gradient `theta_t - theta_final`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::tensors::{ParamVector, ALL_GROUPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOptimizer {
    Sgd,
    Sgdm,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub optimizer: LocalOptimizer,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_adam_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub prox_mu: f64,
    /// Overwritten per (round, client) by the orchestrator.
    #[serde(default)]
    pub shuffle_seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_adam_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl LocalConfig {
    pub fn sgd(lr: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            optimizer: LocalOptimizer::Sgd,
            lr,
            momentum: default_momentum(),
            adam_betas: default_adam_betas(),
            adam_eps: default_adam_eps(),
            batch_size,
            epochs,
            prox_mu: 0.0,
            shuffle_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("local.{field}"), msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam_betas", "must be in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return bad("prox_mu", "must be non-negative");
        }
        Ok(())
    }
}

/// One client's local data: a view of the pooled dataset.
#[derive(Debug, Clone, Copy)]
pub struct ClientShard<'a> {
    pub data: &'a LabeledDataset,
    pub indices: &'a [usize],
}

/// SCAFFOLD control variates as seen by one client.
#[derive(Debug, Clone, Copy)]
pub struct ControlVariates<'a> {
    pub global_c: &'a ParamVector,
    pub local_c: &'a ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Pseudo-gradient `theta_t - theta_final`.
    pub pseudo_grad: ParamVector,
    /// New SCAFFOLD local control variate, when control variates were supplied.
    pub updated_c: Option<ParamVector>,
    /// Mean minibatch loss over all local steps.
    pub mean_loss: f64,
    pub steps: usize,
}

enum OptState {
    Sgd,
    Sgdm { buf: ParamVector },
    Adam { m: ParamVector, v: ParamVector, t: i32 },
}

pub fn local_train(
    spec: &ModelSpec,
    theta_t: &ParamVector,
    shard: ClientShard<'_>,
    cfg: &LocalConfig,
    cv: Option<ControlVariates<'_>>,
) -> Result<LocalUpdate> {
    if shard.indices.is_empty() {
        return Err(Error::EmptyShard);
    }
    if cv.is_some() && cfg.optimizer != LocalOptimizer::Sgd {
        return Err(Error::ScaffoldRequiresSgd);
    }
    let correction = match cv {
        Some(cv) => {
            cv.global_c.check_congruent(theta_t)?;
            Some(cv.global_c.sub(cv.local_c)?)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order = shard.indices.to_vec();
    let mut theta = theta_t.clone();
    let mut opt = match cfg.optimizer {
        LocalOptimizer::Sgd => OptState::Sgd,
        LocalOptimizer::Sgdm => OptState::Sgdm { buf: theta.zeros_like() },
        LocalOptimizer::Adam => OptState::Adam {
            m: theta.zeros_like(),
            v: theta.zeros_like(),
            t: 0,
        },
    };
    let mut steps = 0usize;
    let mut loss_sum = 0.0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // the trailing partial batch is kept
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_indices(shard.data, chunk)?;
            let (loss, mut grad) = models::loss_and_grad(spec, &theta, &batch)?;
            loss_sum += loss;
            if cfg.prox_mu > 0.0 {
                grad.axpy_in_place(cfg.prox_mu, &theta.sub(theta_t)?)?;
            }
            if let Some(corr) = &correction {
                grad.axpy_in_place(1.0, corr)?;
            }
            match &mut opt {
                OptState::Sgd => theta.axpy_in_place(-cfg.lr, &grad)?,
                OptState::Sgdm { buf } => {
                    buf.scale_in_place(cfg.momentum);
                    buf.axpy_in_place(1.0, &grad)?;
                    theta.axpy_in_place(-cfg.lr, buf)?;
                }
                OptState::Adam { m, v, t } => {
                    let (b1, b2) = cfg.adam_betas;
                    *t += 1;
                    *m = m.zip_map(&grad, |mi, gi| b1 * mi + (1.0 - b1) * gi)?;
                    *v = v.zip_map(&grad, |vi, gi| b2 * vi + (1.0 - b2) * gi * gi)?;
                    let c1 = 1.0 - b1.powi(*t);
                    let c2 = 1.0 - b2.powi(*t);
                    let step = m.zip_map(v, |mi, vi| (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps))?;
                    theta.axpy_in_place(-cfg.lr, &step)?;
                }
            }
            steps += 1;
        }
    }

    let pseudo_grad = theta_t.sub(&theta)?;
    let updated_c = match cv {
        Some(cv) => {
            // SCAFFOLD option II: c_k+ = c_k - c + (theta_t - theta_final) / (K * lr)
            let mut c = cv.local_c.sub(cv.global_c)?;
            c.axpy_in_place(1.0 / (steps as f64 * cfg.lr), &pseudo_grad)?;
            Some(c)
        }
        None => None,
    };
    Ok(LocalUpdate {
        pseudo_grad,
        updated_c,
        mean_loss: loss_sum / steps as f64,
        steps,
    })
}

/// Per-group squared norms plus the whole-vector entry under [`ALL_GROUPS`].
pub fn pseudo_grad_sq_norms(g: &ParamVector) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut total = 0.0;
    for group in g.groups() {
        let n = group.sq_norm();
        total += n;
        out.insert(group.name().to_string(), n);
    }
    out.insert(ALL_GROUPS.to_string(), total);
    out
}
