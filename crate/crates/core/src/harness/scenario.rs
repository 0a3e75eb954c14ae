//! Forced bad-round scenario: one round samples only clients dominated by a
//! single class, and baseline and FedGLAD runs are compared around it.

use serde::Serialize;

use super::config::RunConfig;
use super::diagnostics::quantile;
use super::runner::{prepare, run_prepared, Prepared, SeedRun};
use crate::error::{Error, Result};
use crate::sampling::SamplingStrategy;

/// Clients whose shard is majority `class`, most concentrated first (ties by id).
pub fn majority_clients(prepared: &Prepared, class: usize) -> Result<Vec<usize>> {
    let part = &prepared.partition;
    let mut scored = Vec::new();
    for k in 0..part.num_clients() {
        let counts = part.client_counts(&prepared.train, k)?;
        let total: usize = counts.iter().sum();
        let hits = counts.get(class).copied().unwrap_or(0);
        if 2 * hits > total {
            scored.push((hits as f64 / total as f64, k));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, k)| k).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSeed {
    pub seed: u64,
    pub forced_clients: Vec<usize>,
    /// acc(bad_round - 1) - acc(bad_round).
    pub baseline_drop: f64,
    pub fedglad_drop: f64,
    /// Whole-model GSI of the FedGLAD run at the forced round.
    pub gsi_at_bad_round: f64,
    /// 10th percentile of the FedGLAD run's whole-model GSI over all rounds.
    pub gsi_p10: f64,
    pub baseline_final10: f64,
    pub fedglad_final10: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub bad_round: Option<usize>,
    pub target_class: usize,
    /// False when no round was forced; both arms then share one schedule.
    pub active: bool,
    pub seeds: Vec<ScenarioSeed>,
}

impl ScenarioReport {
    pub fn fedglad_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.fedglad_drop <= s.baseline_drop).count()
    }
}

fn acc_at(run: &SeedRun, t: usize) -> Result<f64> {
    run.records
        .get(t)
        .and_then(|r| r.eval_acc)
        .ok_or_else(|| Error::InsufficientData(format!("no accuracy at round {t}")))
}

/// Baseline (FedGLAD off) and FedGLAD arms derived from `cfg`, with
/// per-round evaluation so the drop is measurable.
pub fn scenario_arms(cfg: &RunConfig) -> (RunConfig, RunConfig) {
    let mut base = cfg.clone();
    base.eval_every = 1;
    base.fedglad.enabled = false;
    let mut glad = base.clone();
    glad.fedglad.enabled = true;
    (base, glad)
}

/// Runs both arms for every seed. `bad_round = None` disables the forced
/// round and reports the scenario as inactive.
pub fn forced_bad_round_scenario(cfg: &RunConfig, bad_round: Option<usize>, target_class: usize) -> Result<ScenarioReport> {
    cfg.validate()?;
    if let Some(t) = bad_round {
        if t == 0 || t >= cfg.rounds {
            return Err(Error::config("scenario.round", format!("must lie in 1..{}", cfg.rounds)));
        }
    }
    let (base_cfg, glad_cfg) = scenario_arms(cfg);
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let prepared = prepare(cfg, seed)?;
        let (mut base, mut glad) = (base_cfg.clone(), glad_cfg.clone());
        let mut forced = Vec::new();
        if let Some(t) = bad_round {
            let candidates = majority_clients(&prepared, target_class)?;
            if candidates.len() < cfg.sample_count {
                return Err(Error::NoSuchClients(format!(
                    "seed {seed}: {} clients are majority class {target_class}, need {}",
                    candidates.len(),
                    cfg.sample_count
                )));
            }
            forced = candidates[..cfg.sample_count].to_vec();
            forced.sort_unstable();
            for arm in [&mut base, &mut glad] {
                arm.sampler.strategy = SamplingStrategy::Forced;
                arm.sampler.schedule_file = None;
                arm.sampler.schedule = [(t.to_string(), forced.clone())].into();
            }
        }
        let base_run = run_prepared(&base, &prepared)?;
        let glad_run = run_prepared(&glad, &prepared)?;
        let (baseline_drop, fedglad_drop, gsi_at_bad_round) = match bad_round {
            Some(t) => (
                acc_at(&base_run, t - 1)? - acc_at(&base_run, t)?,
                acc_at(&glad_run, t - 1)? - acc_at(&glad_run, t)?,
                glad_run.records[t].gsi_all.unwrap_or(f64::NAN),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let all_gsi: Vec<f64> = glad_run.records.iter().filter_map(|r| r.gsi_all).collect();
        seeds.push(ScenarioSeed {
            seed,
            forced_clients: forced,
            baseline_drop,
            fedglad_drop,
            gsi_at_bad_round,
            gsi_p10: quantile(&all_gsi, 0.1).unwrap_or(f64::NAN),
            baseline_final10: base_run.final10_accuracy(),
            fedglad_final10: glad_run.final10_accuracy(),
        });
    }
    Ok(ScenarioReport {
        bad_round,
        target_class,
        active: bad_round.is_some(),
        seeds,
    })
}
