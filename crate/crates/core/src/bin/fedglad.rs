use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedglad::data::merged_label_distribution;
use fedglad::harness::config::set_dotted;
use fedglad::harness::diagnostics::{mean_std, pearson, MIN_CORRELATION_ROUNDS};
use fedglad::harness::metrics::{self, MetricsTable};
use fedglad::harness::scenario::{forced_bad_round_scenario, majority_clients};
use fedglad::harness::{prepare, run_experiment, RunConfig};
use fedglad::{Error, Result};

const SCHEMA_HELP: &str = "\
config file (TOML, unknown keys rejected):
  n_clients, sample_count, rounds, alpha, algorithm = fedavg|fedprox|fedavgm|fedadam|scaffold
  seeds = [..], output_dir, workers, eval_every, standardize
  [dataset] kind = \"synth\": n_train, n_test, dim, classes, spread, seed?
            kind = \"mnist_idx\": train_images, train_labels, test_images, test_labels
  [model] kind = logreg|mlp, hidden_dims
  [local] optimizer = sgd|sgdm|adam, lr, batch_size, epochs, momentum, adam_betas, adam_eps, prox_mu
  [server] optimizer = sgd|sgdm|adam, eta0, beta1, beta2, eps
  [fedglad] enabled, mode = groupwise|universal, beta, gamma
  [sampler] strategy = uniform|md|adafl|forced, adafl_alpha, schedule_file, [sampler.schedule]
  [diagnostics] oracle_mode, sim_score, scale_ratio";

#[derive(Parser)]
#[command(name = "fedglad", about = "Federated learning simulator with GSI-driven server learning rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write metrics.
    Run {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides `workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one config per value of a parameter, then rank by tail training loss.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...` with a dotted key such as `fedglad.gamma`.
        #[arg(long)]
        param: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Forced scenarios comparing baseline and FedGLAD.
    Scenario {
        #[command(subcommand)]
        kind: ScenarioKind,
    },
    /// Summarize run directories; with two or more runs, compare their trajectories.
    Diagnose {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Describe the client partition of each seed.
    PartitionStats { config: PathBuf },
}

#[derive(Subcommand)]
enum ScenarioKind {
    /// One round samples only clients dominated by `--class`.
    BadRound {
        config: PathBuf,
        /// Round to force; omitted means no round is forced.
        #[arg(long)]
        round: Option<usize>,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{SCHEMA_HELP}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, output, workers } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let dir = output.unwrap_or_else(|| cfg.output_dir.clone());
            run_to_dir(&cfg, &dir)?;
            Ok(())
        }
        Command::Sweep { config, param, output } => sweep(&config, &param, output),
        Command::Scenario {
            kind: ScenarioKind::BadRound { config, round, class, output },
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = forced_bad_round_scenario(&cfg, round, class)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if !report.active {
                println!("scenario inactive: no round forced, both arms share the configured sampler");
            } else {
                println!("fedglad drop <= baseline drop on {}/{} seeds", report.fedglad_wins(), report.seeds.len());
            }
            if let Some(dir) = output {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join("scenario.json");
                std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Diagnose { dirs } => diagnose(&dirs),
        Command::PartitionStats { config } => partition_stats(&config),
    }
}

fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<f64> {
    let result = run_experiment(cfg)?;
    metrics::write_run_dir(dir, cfg, &result)?;
    let s = &result.summary;
    println!(
        "{}: final-10 accuracy {:.4} +/- {:.4} over {} seed(s)",
        dir.display(),
        s.final10_mean,
        s.final10_std,
        s.seeds.len()
    );
    let tails: Vec<f64> = s.seeds.iter().filter_map(|x| x.tail_train_loss).collect();
    Ok(mean_std(&tails).0)
}

fn sweep(config: &Path, param: &str, output: Option<PathBuf>) -> Result<()> {
    let (key, values) = param
        .split_once('=')
        .ok_or_else(|| Error::config("--param", "expected key=v1,v2,..."))?;
    let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::config("--param", "no values given"));
    }
    let text = std::fs::read_to_string(config).map_err(|e| Error::config(config.display().to_string(), e.to_string()))?;
    let base_doc: toml::Value = toml::from_str(&text).map_err(|e| Error::config(config.display().to_string(), e.to_string()))?;
    let base_dir = config.parent().unwrap_or(Path::new("."));

    // validate every variant before running any
    let mut variants = Vec::new();
    for v in &values {
        let mut doc = base_doc.clone();
        set_dotted(&mut doc, key, v)?;
        let mut cfg = RunConfig::from_toml_value(doc)?;
        cfg.resolve_relative_paths(base_dir);
        variants.push((v.to_string(), cfg));
    }
    let root = output.unwrap_or_else(|| variants[0].1.output_dir.clone());
    let mut ranking = Vec::new();
    for (v, cfg) in &variants {
        let tail = run_to_dir(cfg, &root.join(format!("{key}={v}")))?;
        ranking.push((v.clone(), tail));
    }
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut report = String::from("value,tail_train_loss\n");
    for (v, tail) in &ranking {
        report.push_str(&format!("{v},{tail}\n"));
    }
    let path = root.join("selection.csv");
    std::fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    println!("selected {key}={} (lowest training loss over the final 20% of rounds)", ranking[0].0);
    Ok(())
}

/// Directories holding metrics CSVs: the argument itself, or its subdirectories.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !metrics::list_metrics_files(dir)?.is_empty() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    let mut out = Vec::new();
    for s in subs {
        if !metrics::list_metrics_files(&s)?.is_empty() {
            out.push(s);
        }
    }
    Ok(out)
}

/// Columns that must agree for two runs to count as the same trajectory.
/// Multipliers are left out: they may differ only where the step is unchanged.
fn trajectory(table: &MetricsTable) -> Vec<Vec<String>> {
    let keep: Vec<usize> = table
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| !h.ends_with(".multiplier"))
        .map(|(i, _)| i)
        .collect();
    table.rows.iter().map(|r| keep.iter().map(|&i| r[i].clone()).collect()).collect()
}

fn gsi_sim_correlation(table: &MetricsTable) -> Result<f64> {
    let (gsi, sim) = match (table.column("__all__.gsi"), table.column("sim_score")) {
        (Some(g), Some(s)) => (g, s),
        _ => return Err(Error::InsufficientData("missing columns".into())),
    };
    let (gsi, sim): (Vec<f64>, Vec<f64>) = gsi
        .iter()
        .zip(&sim)
        .filter_map(|(g, s)| Some((g.parse::<f64>().ok()?, s.parse::<f64>().ok()?)))
        .unzip();
    if gsi.len() < MIN_CORRELATION_ROUNDS {
        return Err(Error::InsufficientData(format!("{} rounds with GSI and sim_score", gsi.len())));
    }
    pearson(&gsi, &sim)
}

fn diagnose(dirs: &[PathBuf]) -> Result<()> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(run_dirs(d)?);
    }
    if runs.is_empty() {
        return Err(Error::InsufficientData("no metrics_seed*.csv files found".into()));
    }
    let mut tables = Vec::new();
    for run in &runs {
        let mut per_seed = Vec::new();
        for path in metrics::list_metrics_files(run)? {
            let table = metrics::read_metrics_csv(&path)?;
            let accs = table.floats("eval_acc").unwrap_or_default();
            let tail = &accs[accs.len().saturating_sub(10)..];
            let final10 = mean_std(tail).0;
            let ratio = mean_std(&table.floats("scale_ratio").unwrap_or_default()).0;
            let corr = gsi_sim_correlation(&table)
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|e| format!("n/a ({e})"));
            println!(
                "{}: rounds={} final10_acc={final10:.4} mean_scale_ratio={ratio:.4} pearson(gsi,sim)={corr}",
                path.display(),
                table.rows.len()
            );
            per_seed.push((path.file_name().unwrap().to_owned(), trajectory(&table)));
        }
        tables.push(per_seed);
    }
    if tables.len() >= 2 {
        let first = &tables[0];
        let same = tables[1..].iter().all(|t| t == first);
        println!("{}", if same { "EQUIVALENT" } else { "DIFFERENT" });
    }
    Ok(())
}

fn partition_stats(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    for &seed in &cfg.seeds {
        let prepared = prepare(&cfg, seed)?;
        let part = &prepared.partition;
        let mut entropies = Vec::new();
        for k in 0..part.num_clients() {
            entropies.push(part.client_distribution(&prepared.train, k)?.entropy());
        }
        let (mean_h, std_h) = mean_std(&entropies);
        let global = prepared.global_distribution.entropy();
        let everyone: Vec<usize> = (0..part.num_clients()).collect();
        let merged = merged_label_distribution(part, &prepared.train, &everyone)?;
        let majority: Vec<String> = (0..merged.num_classes())
            .map(|c| majority_clients(&prepared, c).map(|v| v.len().to_string()))
            .collect::<Result<_>>()?;
        println!(
            "seed {seed}: clients={} quota={} dropped={} client_entropy={mean_h:.4}+/-{std_h:.4} global_entropy={global:.4} majority_clients_per_class=[{}]",
            part.num_clients(),
            part.quota(),
            prepared.train.len() - part.quota() * part.num_clients(),
            majority.join(",")
        );
    }
    Ok(())
}
