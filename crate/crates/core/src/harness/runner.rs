use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Algorithm, DatasetConfig, RunConfig, DATA_DIR_ENV};
use super::diagnostics::{self, mean_std};
use super::{GroupRecord, RoundRecord};
use crate::client::{self, ClientShard, ControlVariates, LocalConfig, LocalUpdate};
use crate::data::{
    self, cluster_centers, dirichlet_partition, merged_label_distribution, synth_from_centers, LabelDistribution,
    LabeledDataset, Partition, Standardizer,
};
use crate::error::{Error, Result};
use crate::gsi::{self, AdaptMode, GsiState};
use crate::models::{self, ModelSpec};
use crate::rng::{self, stream};
use crate::sampling::SamplerState;
use crate::server::{self, ServerState};
use crate::tensors::{ParamVector, ALL_GROUPS};

/// Everything a run needs that does not change across rounds.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub spec: ModelSpec,
    pub initial_params: ParamVector,
    /// Label distribution of all retained training samples.
    pub global_distribution: LabelDistribution,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    /// `(loss, accuracy)` of the initial model on the test split.
    pub initial_eval: (f64, f64),
    pub final_params: ParamVector,
}

impl SeedRun {
    /// Mean test accuracy of the last 10 evaluated rounds (initial model when
    /// no round ran).
    pub fn final10_accuracy(&self) -> f64 {
        diagnostics::final_window_accuracy(&self.records, 10).unwrap_or(self.initial_eval.1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final10_accuracy: f64,
    pub tail_train_loss: Option<f64>,
    pub mean_scale_ratio: Option<f64>,
    pub gsi_sim_pearson: Option<f64>,
    pub mean_oracle_eta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub fedglad: bool,
    pub rounds: usize,
    pub seeds: Vec<SeedSummary>,
    pub final10_mean: f64,
    /// Population standard deviation across seeds.
    pub final10_std: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

/// Relative dataset paths live under `root` when the data-dir variable is set.
fn resolve_data_path(root: Option<&OsStr>, p: &Path) -> PathBuf {
    match root {
        Some(root) if p.is_relative() => Path::new(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_datasets(cfg: &RunConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut train, mut test) = match &cfg.dataset {
        DatasetConfig::Synth { n_train, n_test, dim, classes, spread, seed: data_seed } => {
            let ds_seed = data_seed.unwrap_or(seed);
            let centers = cluster_centers(*dim, *classes, ds_seed)?;
            let train = synth_from_centers(&centers, *classes, *n_train, *spread, rng::derive_seed(ds_seed, &[stream::DATA_TRAIN]))?;
            let test = synth_from_centers(&centers, *classes, *n_test, *spread, rng::derive_seed(ds_seed, &[stream::DATA_TEST]))?;
            (train, test)
        }
        DatasetConfig::MnistIdx { train_images, train_labels, test_images, test_labels } => {
            let root = std::env::var_os(DATA_DIR_ENV);
            let resolve_data_path = |p: &PathBuf| resolve_data_path(root.as_deref(), p);
            let train = data::load_idx(resolve_data_path(train_images), resolve_data_path(train_labels))?;
            let test = data::load_idx(resolve_data_path(test_images), resolve_data_path(test_labels))?;
            (train, test)
        }
    };
    if train.dim() != test.dim() {
        return Err(Error::InvalidDims(format!("train dim {} vs test dim {}", train.dim(), test.dim())));
    }
    if cfg.standardize {
        let s = Standardizer::fit(&train);
        s.apply(&mut train);
        s.apply(&mut test);
    }
    Ok((train, test))
}

/// Builds data, partition and initial model for one seed.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let (train, test) = load_datasets(cfg, seed)?;
    let num_classes = train.num_classes().max(test.num_classes());
    let partition = dirichlet_partition(&train, cfg.n_clients, cfg.alpha, rng::derive_seed(seed, &[stream::PARTITION]))?;
    let spec = cfg.model.spec(train.dim(), num_classes, rng::derive_seed(seed, &[stream::INIT]));
    let initial_params = models::init_params(&spec)?;
    let everyone: Vec<usize> = (0..cfg.n_clients).collect();
    let global_distribution = merged_label_distribution(&partition, &train, &everyone)?;
    Ok(Prepared {
        seed,
        train,
        test,
        partition,
        spec,
        initial_params,
        global_distribution,
    })
}

pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let prepared = prepare(cfg, seed)?;
    run_prepared(cfg, &prepared)
}

struct Job {
    client: usize,
    shuffle_seed: u64,
}

/// Shuffle seeds keyed by (seed, round, client, occurrence) so duplicate
/// draws train independently and thread scheduling never matters.
fn jobs_for(seed: u64, t: usize, clients: &[usize]) -> Vec<Job> {
    let mut seen: BTreeMap<usize, u64> = BTreeMap::new();
    clients
        .iter()
        .map(|&k| {
            let occ = seen.entry(k).or_insert(0);
            let job = Job {
                client: k,
                shuffle_seed: rng::derive_seed(seed, &[stream::SHUFFLE, t as u64, k as u64, *occ]),
            };
            *occ += 1;
            job
        })
        .collect()
}

struct RoundContext<'a> {
    cfg: &'a RunConfig,
    prepared: &'a Prepared,
    pool: &'a rayon::ThreadPool,
}

impl RoundContext<'_> {
    fn train_clients(
        &self,
        theta: &ParamVector,
        jobs: &[Job],
        global_c: Option<&ParamVector>,
        local_c: &[Option<ParamVector>],
    ) -> Result<Vec<LocalUpdate>> {
        let zeros = theta.zeros_like();
        let p = self.prepared;
        let results: Vec<Result<LocalUpdate>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|job| {
                    let local = LocalConfig {
                        shuffle_seed: job.shuffle_seed,
                        ..self.cfg.local.clone()
                    };
                    let shard = ClientShard {
                        data: &p.train,
                        indices: p.partition.shard(job.client)?,
                    };
                    let cv = global_c.map(|c| ControlVariates {
                        global_c: c,
                        local_c: local_c[job.client].as_ref().unwrap_or(&zeros),
                    });
                    client::local_train(&p.spec, theta, shard, &local, cv)
                })
                .collect()
        });
        results.into_iter().collect()
    }
}

/// Runs all rounds of one seed on prepared data.
pub fn run_prepared(cfg: &RunConfig, prepared: &Prepared) -> Result<SeedRun> {
    let seed = prepared.seed;
    let n = cfg.n_clients;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let ctx = RoundContext { cfg, prepared, pool: &pool };

    let scaffold = cfg.algorithm == Algorithm::Scaffold;
    let mut server = ServerState::new(prepared.initial_params.clone(), cfg.server_config(), scaffold);
    let mut local_c: Vec<Option<ParamVector>> = vec![None; n];
    let mut gsi_state = GsiState::new(cfg.fedglad.mode, cfg.fedglad.beta, cfg.fedglad.gamma)?;
    let mut sampler = SamplerState::new(cfg.sampler.strategy, n, rng::derive_seed(seed, &[stream::SAMPLING]))
        .with_adafl_alpha(cfg.sampler.adafl_alpha)?
        .with_schedule(cfg.schedule()?)?;

    let initial_eval = models::evaluate(&prepared.spec, &server.theta, &prepared.test)?;
    let mut records = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let started = Instant::now();
        let record = run_round(&ctx, t, &mut server, &mut local_c, &mut gsi_state, &mut sampler)
            .map_err(|e| e.in_round(t))?;
        records.push(RoundRecord {
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            ..record
        });
    }

    Ok(SeedRun {
        seed,
        records,
        initial_eval,
        final_params: server.theta,
    })
}

fn run_round(
    ctx: &RoundContext<'_>,
    t: usize,
    server: &mut ServerState,
    local_c: &mut [Option<ParamVector>],
    gsi_state: &mut GsiState,
    sampler: &mut SamplerState,
) -> Result<RoundRecord> {
    let cfg = ctx.cfg;
    let p = ctx.prepared;
    let mut sampled = sampler.sample(t, cfg.sample_count)?;
    // reduction order is ascending client id, forced lists included
    sampled.sort_unstable();

    let theta = server.theta.clone();
    let jobs = jobs_for(p.seed, t, &sampled);
    let updates = ctx.train_clients(&theta, &jobs, server.scaffold_c.as_ref(), local_c)?;

    let grads: Vec<ParamVector> = updates.iter().map(|u| u.pseudo_grad.clone()).collect();
    let norms: Vec<BTreeMap<String, f64>> = grads.iter().map(client::pseudo_grad_sq_norms).collect();
    let g_bar = server::aggregate(&grads)?;
    let train_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;

    let per_group = gsi::compute_gsi(&norms, &g_bar, AdaptMode::Groupwise)?;
    let whole = gsi::compute_gsi(&norms, &g_bar, AdaptMode::Universal)?;
    let (multipliers, raw_ratio) = if cfg.fedglad.enabled {
        let obs = match cfg.fedglad.mode {
            AdaptMode::Groupwise => &per_group,
            AdaptMode::Universal => &whole,
        };
        let report = gsi_state.step(obs)?;
        (report.group_multipliers(&theta)?, report.raw_ratio)
    } else {
        (server::unit_multipliers(&theta), BTreeMap::new())
    };

    let oracle_eta = if cfg.diagnostics.oracle_mode {
        let all: Vec<usize> = (0..cfg.n_clients).collect();
        let full = ctx.train_clients(&theta, &jobs_for(p.seed, t, &all), server.scaffold_c.as_ref(), local_c)?;
        let full: Vec<ParamVector> = full.into_iter().map(|u| u.pseudo_grad).collect();
        let g_full = server::aggregate(&full)?;
        gsi::optimal_lr_oracle(&g_bar, &g_full, cfg.server.eta0).ok()
    } else {
        None
    };

    server.apply_round(&g_bar, &multipliers)?;

    if server.scaffold_c.is_some() {
        let zeros = theta.zeros_like();
        let mut deltas = Vec::with_capacity(updates.len());
        let mut fresh: BTreeMap<usize, ParamVector> = BTreeMap::new();
        for (job, up) in jobs.iter().zip(&updates) {
            let new_c = up.updated_c.as_ref().expect("scaffold clients return control variates");
            let old_c = local_c[job.client].as_ref().unwrap_or(&zeros);
            deltas.push(new_c.sub(old_c)?);
            fresh.insert(job.client, new_c.clone());
        }
        for (k, c) in fresh {
            local_c[k] = Some(c);
        }
        let mean_delta = server::aggregate(&deltas)?;
        server.scaffold_server_update(&mean_delta, sampled.len(), cfg.n_clients)?;
    }

    if sampler.strategy() == crate::sampling::SamplingStrategy::Adafl {
        let by_client: BTreeMap<usize, f64> = sampled.iter().zip(&norms).map(|(&k, n)| (k, n[ALL_GROUPS])).collect();
        sampler.adafl_update(&sampled, &by_client)?;
    }

    let (eval_loss, eval_acc) = if t.is_multiple_of(cfg.eval_every) || t + 1 == cfg.rounds {
        let (l, a) = models::evaluate(&p.spec, &server.theta, &p.test)?;
        (Some(l), Some(a))
    } else {
        (None, None)
    };

    let sim_score = if cfg.diagnostics.sim_score {
        let merged = merged_label_distribution(&p.partition, &p.train, &sampled)?;
        Some(data::similarity_score(merged.probs(), p.global_distribution.probs())?)
    } else {
        None
    };
    let scale_ratio = if cfg.diagnostics.scale_ratio && norms.len() >= 2 {
        let all: Vec<f64> = norms.iter().map(|n| n[ALL_GROUPS]).collect();
        Some(diagnostics::scale_ratio_diagnostic(&all)?)
    } else {
        None
    };

    let groups = theta
        .group_names()
        .map(|name| GroupRecord {
            name: name.to_string(),
            gsi: per_group.get(name),
            multiplier: multipliers[name],
            raw_ratio: raw_ratio.get(name).or_else(|| raw_ratio.get(ALL_GROUPS)).copied(),
        })
        .collect();

    Ok(RoundRecord {
        round: t,
        train_loss,
        eval_loss,
        eval_acc,
        gsi_all: whole.get(ALL_GROUPS),
        sim_score,
        scale_ratio,
        oracle_eta,
        groups,
        sampled,
        wall_time_ms: 0.0,
    })
}

pub fn summarize(cfg: &RunConfig, runs: &[SeedRun]) -> Summary {
    let seeds: Vec<SeedSummary> = runs
        .iter()
        .map(|run| {
            let oracle: Vec<f64> = run.records.iter().filter_map(|r| r.oracle_eta).collect();
            SeedSummary {
                seed: run.seed,
                final10_accuracy: run.final10_accuracy(),
                tail_train_loss: diagnostics::tail_train_loss(&run.records, 0.2),
                mean_scale_ratio: diagnostics::mean_scale_ratio(&run.records),
                gsi_sim_pearson: diagnostics::gsi_sim_correlation(&run.records).ok(),
                mean_oracle_eta: (!oracle.is_empty()).then(|| oracle.iter().sum::<f64>() / oracle.len() as f64),
            }
        })
        .collect();
    let accs: Vec<f64> = seeds.iter().map(|s| s.final10_accuracy).collect();
    let (final10_mean, final10_std) = mean_std(&accs);
    Summary {
        algorithm: cfg.algorithm,
        fedglad: cfg.fedglad.enabled,
        rounds: cfg.rounds,
        seeds,
        final10_mean,
        final10_std,
    }
}

/// Runs every configured seed in order.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &runs);
    Ok(ExperimentResult { runs, summary })
}
