//! Config-driven experiment runner and run comparison.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Blobs, Dataset, ManualGroup, Partition, PublicDataset};
use crate::error::{Error, Result};
use crate::fl::{self, Algorithm, ClientState, WeightDenominator, LocalConfig, RoundConfig, RoundEnv, ServerState};
use crate::metrics::{self, CostLedger, RoundMetrics};
use crate::nn::{self, ModelParams, ModelSpec};
use crate::sampling::{self, ClusterAssignment, PreprocessConfig, SamplingPlan, SimilarityMatrix, SoftLabelReduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        test_per_class: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Distribution-based label skew.
    Labeldir { beta: f64 },
    /// Quantity-based label skew ("labelX").
    Quantity { labels_per_client: usize },
    Manual { groups: Vec<ManualGroup> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Uniform,
    Lefl,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Sampler::Uniform),
            "lefl" => Ok(Sampler::Lefl),
            other => Err(Error::invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Who trains in round 1 when the clustering step follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Round1Participation {
    /// Every client trains and uploads in round 1; those local models supply
    /// the soft labels.
    #[default]
    All,
    /// Round 1 samples uniformly; every client then trains a separate
    /// soft-label model from the post-round-1 global model.
    Sampled,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.99
}
fn default_batch() -> usize {
    10
}
fn default_public() -> usize {
    1000
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run_name: Option<String>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub n_clients: usize,
    /// Hidden layer widths; input and output widths come from the data.
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    pub algorithm: Algorithm,
    pub sampler: Sampler,
    pub sample_ratio: f64,
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub cluster_k: Option<usize>,
    #[serde(default = "default_public")]
    pub public_count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub weight_denominator: WeightDenominator,
    #[serde(default)]
    pub soft_label_reduction: SoftLabelReduction,
    #[serde(default)]
    pub round1_participation: Round1Participation,
    /// Keep SCAFFOLD control variates between rounds. Must be true for scaffold.
    #[serde(default = "default_true")]
    pub store_control_variates: bool,
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Earlier run directory to report the cost difference against.
    #[serde(default)]
    pub baseline_run: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Clients sampled per round: `round(sample_ratio * n_clients)`.
    pub fn budget(&self) -> usize {
        ((self.sample_ratio * self.n_clients as f64).round() as usize).clamp(1, self.n_clients.max(1))
    }

    pub fn run_name(&self) -> String {
        self.run_name.clone().unwrap_or_else(|| {
            let sampler = match self.sampler {
                Sampler::Uniform => "uniform",
                Sampler::Lefl => "lefl",
            };
            format!("{}_{}_s{}", self.algorithm.name(), sampler, self.seed.unwrap_or(0))
        })
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            decay: self.decay,
            algorithm: self.algorithm,
            prox_mu: self.prox_mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let seed_missing = self.seed.is_none();
        if seed_missing {
            return Err(Error::config("seed", "a seed is required (set it in the config or pass --seed)"));
        }
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be >= 1"));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::config("sample_ratio", "must be in (0, 1]"));
        }
        if self.sample_ratio * (self.n_clients as f64) < 1.0 {
            return Err(Error::config(
                "sample_ratio",
                format!("samples no client: {} x {} < 1", self.sample_ratio, self.n_clients),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        self.local_config().validate()?;
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_layers", "widths must be positive"));
        }
        if self.public_count == 0 {
            return Err(Error::config("public_count", "must be >= 1"));
        }
        if let Some(k) = self.cluster_k {
            if k == 0 || k > self.n_clients {
                return Err(Error::config("cluster_k", format!("must be in [1, {}]", self.n_clients)));
            }
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config("target_accuracy", "must be in (0, 1)"));
            }
        }
        if self.algorithm == Algorithm::Scaffold && !self.store_control_variates {
            return Err(Error::config("store_control_variates", "scaffold needs control-variate storage"));
        }
        let num_classes = match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                dim,
                per_class,
                spread,
                test_per_class,
            } => {
                if *num_classes < 2 {
                    return Err(Error::config("dataset.num_classes", "must be >= 2"));
                }
                if *dim == 0 {
                    return Err(Error::config("dataset.dim", "must be >= 1"));
                }
                if *per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("dataset.per_class", "per_class and test_per_class must be >= 1"));
                }
                if !(*spread >= 0.0) || !spread.is_finite() {
                    return Err(Error::config("dataset.spread", "must be finite and >= 0"));
                }
                if num_classes * per_class < self.n_clients {
                    return Err(Error::config("n_clients", "more clients than training samples"));
                }
                Some(*num_classes)
            }
            DatasetConfig::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::config("dataset.test_fraction", "must be in (0, 1)"));
                }
                None
            }
        };
        match &self.partition {
            PartitionConfig::Labeldir { beta } => {
                if !(*beta > 0.0) || !beta.is_finite() {
                    return Err(Error::config("partition.beta", "must be > 0"));
                }
            }
            PartitionConfig::Quantity { labels_per_client } => {
                if *labels_per_client == 0 {
                    return Err(Error::config("partition.labels_per_client", "must be >= 1"));
                }
                if let Some(k) = num_classes {
                    if *labels_per_client > k {
                        return Err(Error::config("partition.labels_per_client", format!("exceeds class count {k}")));
                    }
                    if self.n_clients * labels_per_client < k {
                        return Err(Error::config(
                            "partition.labels_per_client",
                            format!("{} clients x {labels_per_client} labels cannot cover {k} labels", self.n_clients),
                        ));
                    }
                }
            }
            PartitionConfig::Manual { groups } => {
                let total: usize = groups.iter().map(|g| g.clients).sum();
                if total != self.n_clients {
                    return Err(Error::config(
                        "partition.groups",
                        format!("groups define {total} clients but n_clients is {}", self.n_clients),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Everything a run produces, also written to its directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
    pub partition: Partition,
    pub similarity: Option<SimilarityMatrix>,
    pub clusters: Option<ClusterAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_name: String,
    pub algorithm: Algorithm,
    pub sampler: Sampler,
    pub rounds: usize,
    pub budget: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    pub mean_sample_relative_entropy: f64,
    pub model_bytes: u64,
    pub per_client_round_bytes: u64,
    pub one_time_bytes: u64,
    /// Round whose cost record carries the one-time charge.
    pub one_time_round: Option<usize>,
    pub total_bytes: u64,
    pub target_accuracy: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub dropped_updates: usize,
    #[serde(default)]
    pub baseline: Option<String>,
    /// Bytes to target minus the baseline's, excluding one-time costs.
    #[serde(default)]
    pub delta_bytes_vs_baseline: Option<i64>,
}

/// Loaded data for one configuration.
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub spec: ModelSpec,
    pub public: PublicDataset,
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let seed = cfg.seed.unwrap();
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            num_classes,
            dim,
            per_class,
            spread,
            test_per_class,
        } => {
            let blobs = Blobs::new(*num_classes, *dim, seed)?;
            (
                blobs.sample(*per_class, *spread, seed, 0)?,
                blobs.sample(*test_per_class, *spread, seed, 1)?,
            )
        }
        DatasetConfig::Csv { path, test_fraction } => Dataset::from_csv(path)?.split(*test_fraction, seed)?,
    };
    let partition = match &cfg.partition {
        PartitionConfig::Labeldir { beta } => data::partition_dirichlet(&train, cfg.n_clients, *beta, seed)?,
        PartitionConfig::Quantity { labels_per_client } => {
            data::partition_quantity(&train, cfg.n_clients, *labels_per_client, seed)?
        }
        PartitionConfig::Manual { groups } => data::partition_manual(&train, groups)?,
    };
    let mut sizes = vec![train.dim()];
    sizes.extend_from_slice(&cfg.hidden_layers);
    sizes.push(train.num_classes());
    let spec = ModelSpec::new(sizes)?;
    let public = data::synth_public(train.dim(), cfg.public_count, seed)?;
    Ok(Setup {
        train,
        test,
        partition,
        spec,
        public,
    })
}

struct Simulation {
    metrics: Vec<RoundMetrics>,
    ledger: CostLedger,
    one_time_round: Option<usize>,
    similarity: Option<SimilarityMatrix>,
    clusters: Option<ClusterAssignment>,
}

fn simulate(cfg: &ExperimentConfig, setup: &Setup, workers: usize) -> Result<Simulation> {
    let seed = cfg.seed.unwrap();
    let n = cfg.n_clients;
    let budget = cfg.budget();
    let mut clients: Vec<ClientState> = fl::make_clients(&setup.train, &setup.partition)?;
    let global = nn::init_params(&setup.spec, seed)?;
    let mut server = ServerState::new(global, cfg.algorithm, seed);
    let mut ledger = CostLedger::new(setup.spec.num_params());
    let round_cfg = RoundConfig {
        local: cfg.local_config(),
        weight_denominator: cfg.weight_denominator,
        workers,
    };
    let env = RoundEnv {
        test: &setup.test,
        train_labels: setup.train.labels(),
        partition: &setup.partition,
        num_classes: setup.train.num_classes(),
    };
    let k = setup.train.num_classes();
    let lefl = cfg.sampler == Sampler::Lefl;

    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut clusters: Option<ClusterAssignment> = None;
    let mut similarity = None;
    let mut one_time_round = None;
    let mut pending_one_time = 0u64;

    for round in 1..=cfg.rounds {
        let all_first = lefl && round == 1 && cfg.round1_participation == Round1Participation::All;
        let plan = match (&clusters, all_first) {
            (_, true) => SamplingPlan::all(n, round),
            (Some(assign), false) => sampling::stratified_sample(assign, budget, round, seed)?,
            (None, false) => sampling::uniform_sample(n, budget, round, seed)?,
        };
        let mut one_time = std::mem::take(&mut pending_one_time);
        if all_first {
            one_time += metrics::lefl_one_time_bytes(n, &setup.public, k);
        }
        if one_time > 0 {
            one_time_round = Some(round);
        }
        let outcome = fl::run_round(&server, &mut clients, &plan, &round_cfg, &env, &mut ledger, one_time)?;

        if lefl && round == 1 {
            let (sim, assign) = match cfg.round1_participation {
                Round1Participation::All => {
                    if outcome.updates.len() != n {
                        return Err(Error::invalid(
                            "a client diverged during round 1; soft labels are incomplete",
                        ));
                    }
                    let models: Vec<&ModelParams> = outcome.updates.iter().map(|u| &u.new_params).collect();
                    let soft = sampling::soft_labels_on(&models, &setup.public, workers)?;
                    let (sim, assign, _) =
                        sampling::cluster_soft_labels(soft, cfg.cluster_k, cfg.soft_label_reduction, seed)?;
                    (sim, assign)
                }
                Round1Participation::Sampled => {
                    let pre = sampling::preprocess_lefl(
                        &clients,
                        &outcome.server,
                        &setup.public,
                        &PreprocessConfig {
                            local: cfg.local_config(),
                            cluster_k: cfg.cluster_k,
                            reduction: cfg.soft_label_reduction,
                            workers,
                            model_download_bytes: ledger.model_bytes(),
                        },
                    )?;
                    pending_one_time = pre.cost.one_time_bytes;
                    (pre.similarity, pre.assignment)
                }
            };
            for (c, &label) in clients.iter_mut().zip(assign.labels()) {
                c.cluster = Some(label);
            }
            log::info!("clustered {n} clients into {} groups: sizes {:?}", assign.k(), assign.sizes());
            similarity = Some(sim);
            clusters = Some(assign);
        }
        server = outcome.server;
        log::debug!(
            "round {round}: acc {:.4} loss {:.4} entropy {:.4}",
            outcome.metrics.test_accuracy,
            outcome.metrics.test_loss,
            outcome.metrics.sample_relative_entropy
        );
        metrics.push(outcome.metrics);
    }
    Ok(Simulation {
        metrics,
        ledger,
        one_time_round,
        similarity,
        clusters,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs the configured simulation and writes
/// `<output_dir>/<run_name>/{config.json, metrics.csv, partition.json, summary.json}`
/// plus `similarity_matrix.csv` and `clusters.json` for the clustered sampler.
/// Outputs do not depend on `workers`.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<RunArtifacts> {
    let setup = build_setup(cfg)?;
    let workers = workers.max(1);
    let sim = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| simulate(cfg, &setup, workers))?
    } else {
        simulate(cfg, &setup, 1)?
    };

    let mut echo = cfg.clone();
    echo.run_name = Some(cfg.run_name());
    let dir = cfg.output_dir.join(cfg.run_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let last = sim.metrics.last().expect("rounds >= 1");
    let (down, up) = metrics::per_client_bytes(sim.ledger.model_bytes(), cfg.algorithm);
    let summary = Summary {
        run_name: cfg.run_name(),
        algorithm: cfg.algorithm,
        sampler: cfg.sampler,
        rounds: cfg.rounds,
        budget: cfg.budget(),
        final_accuracy: last.test_accuracy,
        final_loss: last.test_loss,
        best_accuracy: sim.metrics.iter().map(|m| m.test_accuracy).fold(0.0, f64::max),
        mean_sample_relative_entropy: sim.metrics.iter().map(|m| m.sample_relative_entropy).sum::<f64>()
            / sim.metrics.len() as f64,
        model_bytes: sim.ledger.model_bytes(),
        per_client_round_bytes: down + up,
        one_time_bytes: sim.ledger.one_time_total(),
        one_time_round: sim.one_time_round,
        total_bytes: sim.ledger.cumulative(),
        target_accuracy: cfg.target_accuracy,
        rounds_to_target: cfg.target_accuracy.and_then(|t| metrics::rounds_to_target(&sim.metrics, t)),
        dropped_updates: sim.metrics.iter().map(|m| m.dropped).sum(),
        baseline: None,
        delta_bytes_vs_baseline: None,
    };
    let mut summary = summary;

    write(&dir.join("config.json"), &echo.to_json()?)?;
    write(&dir.join("metrics.csv"), &metrics::metrics_to_csv(&sim.metrics))?;
    write(&dir.join("partition.json"), &setup.partition.to_json()?)?;
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    if let (Some(base), Some(target)) = (&cfg.baseline_run, cfg.target_accuracy) {
        let cmp = compare_runs(&[base.clone(), dir.clone()], target)?;
        summary.baseline = Some(cmp.baseline);
        summary.delta_bytes_vs_baseline = cmp.runs[1].delta_bytes_excl_one_time;
        write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    }
    if let (Some(sim_m), Some(assign)) = (&sim.similarity, &sim.clusters) {
        write(&dir.join("similarity_matrix.csv"), &sim_m.to_csv())?;
        write(&dir.join("clusters.json"), &assign.to_json()?)?;
    }

    Ok(RunArtifacts {
        dir,
        metrics: sim.metrics,
        summary,
        partition: setup.partition,
        similarity: sim.similarity,
        clusters: sim.clusters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub run_name: String,
    pub dir: PathBuf,
    pub rounds: usize,
    pub rounds_to_target: Option<usize>,
    /// Round count, or `>R` when the target was never reached.
    pub rounds_display: String,
    pub bytes_to_target: Option<u64>,
    pub bytes_to_target_excl_one_time: Option<u64>,
    pub total_bytes: u64,
    pub one_time_bytes: u64,
    pub delta_bytes: Option<i64>,
    pub delta_bytes_excl_one_time: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target_accuracy: f64,
    pub baseline: String,
    pub runs: Vec<RunComparison>,
}

fn read_run(dir: &Path, target: f64) -> Result<RunComparison> {
    let metrics_path = dir.join("metrics.csv");
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let metrics = metrics::metrics_from_csv(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: metrics_path.clone(),
            message,
        },
        other => other,
    })?;
    let summary_path = dir.join("summary.json");
    let summary: Summary = {
        let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: summary_path.clone(),
            message: e.to_string(),
        })?
    };
    let reached = metrics::rounds_to_target(&metrics, target);
    let bytes_at = reached.map(|r| metrics.iter().find(|m| m.round == r).unwrap().cumulative_bytes);
    let excl = bytes_at.map(|b| {
        let charged = matches!((summary.one_time_round, reached), (Some(o), Some(r)) if o <= r);
        b - if charged { summary.one_time_bytes } else { 0 }
    });
    Ok(RunComparison {
        run_name: summary.run_name,
        dir: dir.to_path_buf(),
        rounds: metrics.len(),
        rounds_to_target: reached,
        rounds_display: reached.map_or_else(|| format!(">{}", metrics.len()), |r| r.to_string()),
        bytes_to_target: bytes_at,
        bytes_to_target_excl_one_time: excl,
        total_bytes: metrics.last().map_or(0, |m| m.cumulative_bytes),
        one_time_bytes: summary.one_time_bytes,
        delta_bytes: None,
        delta_bytes_excl_one_time: None,
    })
}

/// Communication needed to reach `target`, per run, relative to the first run.
pub fn compare_runs(dirs: &[PathBuf], target: f64) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::invalid("compare needs at least two run directories"));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid("target accuracy must be in (0, 1)"));
    }
    let mut runs = dirs.iter().map(|d| read_run(d, target)).collect::<Result<Vec<_>>>()?;
    let base = runs[0].clone();
    let delta = |a: Option<u64>, b: Option<u64>| match (a, b) {
        (Some(a), Some(b)) => Some(a as i64 - b as i64),
        _ => None,
    };
    for r in runs.iter_mut() {
        r.delta_bytes = delta(r.bytes_to_target, base.bytes_to_target);
        r.delta_bytes_excl_one_time = delta(r.bytes_to_target_excl_one_time, base.bytes_to_target_excl_one_time);
    }
    Ok(Comparison {
        target_accuracy: target,
        baseline: base.run_name,
        runs,
    })
}
