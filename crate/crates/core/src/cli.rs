//! Experiment files and the command-line verbs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::BOUND_SLACK;
use crate::data::{self, label_histograms, LabeledDataset, PartitionScheme, PartitionSpec};
use crate::engine::{self, AlgoParams, Algorithm, FederatedData, RunHistory, TrainingConfig};
use crate::error::{Error, Result};
use crate::meanfield::{self, FixedPointConfig, MeanFieldTrajectory, ModelDynamics, RateSolveConfig};
use crate::models::{ModelKind, ModelSpec};
use crate::numerics::{streams, RngStream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

pub const METRICS_HEADER: &str = "round,algorithm,seed,train_loss,test_accuracy,mean_eta,entropy,max_drift,drift_bound,eta_bound_violations";

#[derive(Debug, Parser)]
#[command(name = "fedent", version, about = "Federated learning with entropy-driven adaptive learning rates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the experiment file
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the mean-field fixed point and write the trajectory file
    Precompute(CommonArgs),
    /// Train every configured algorithm and write metrics.csv and summary.json
    Run(CommonArgs),
    /// Write per-client label histograms to partition.csv
    InspectPartition(CommonArgs),
    /// Probe the gradient-norm and smoothness constants of the local losses
    EstimateBounds(CommonArgs),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// IDX image/label files. Without test files, the training files are
    /// shuffled and split.
    Idx {
        train_images: String,
        train_labels: String,
        test_images: Option<String>,
        test_labels: Option<String>,
        train_size: Option<usize>,
        test_size: Option<usize>,
        #[serde(default)]
        split_seed: u64,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        input_dim: usize,
        separation: f64,
        train_size: usize,
        test_size: usize,
        #[serde(default)]
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSection {
    Iid { clients: usize },
    Dirichlet { clients: usize, alpha_d: f64 },
    Pathological { clients: usize, shards_per_client: usize },
}

impl PartitionSection {
    pub fn clients(&self) -> usize {
        match *self {
            PartitionSection::Iid { clients }
            | PartitionSection::Dirichlet { clients, .. }
            | PartitionSection::Pathological { clients, .. } => clients,
        }
    }

    pub fn scheme(&self) -> PartitionScheme {
        match *self {
            PartitionSection::Iid { .. } => PartitionScheme::Iid,
            PartitionSection::Dirichlet { alpha_d, .. } => PartitionScheme::Dirichlet { alpha_d },
            PartitionSection::Pathological {
                shards_per_client, ..
            } => PartitionScheme::Pathological { shards_per_client },
        }
    }
}

fn default_eps() -> f64 {
    meanfield::DEFAULT_EPS
}

fn default_max_outer() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldSection {
    #[serde(default = "default_eps")]
    pub eps1: f64,
    #[serde(default = "default_eps")]
    pub eps2: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    /// Batch size of the fixed per-round gradients; defaults to `batch_size`.
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub solver: SolverSection,
}

impl Default for MeanFieldSection {
    fn default() -> Self {
        MeanFieldSection {
            eps1: default_eps(),
            eps2: default_eps(),
            max_outer: default_max_outer(),
            batch_size: None,
            solver: SolverSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub damping: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let r = RateSolveConfig::default();
        SolverSection {
            inner_tol: r.inner_tol,
            inner_max_iters: r.inner_max_iters,
            damping: r.damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    /// Fixed gradient bound; estimated when absent.
    pub d: Option<f64>,
    /// Probe count; zero means one probe per anchor.
    pub trials: usize,
    pub radius: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            d: None,
            trials: 0,
            radius: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset_dir: Option<PathBuf>,
    pub trajectory_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

fn default_one() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_beta() -> f64 {
    0.99
}
fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub algorithm: Option<Algorithm>,
    pub algorithms: Option<Vec<Algorithm>>,
    #[serde(default)]
    pub seed: u64,
    pub rounds: usize,
    #[serde(default = "default_one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_beta")]
    pub gamma: f64,
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    pub model: ModelSection,
    pub data: DataSection,
    pub partition: PartitionSection,
    #[serde(default)]
    pub meanfield: MeanFieldSection,
    #[serde(default)]
    pub algo: AlgoParams,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// A parsed experiment file with paths resolved and overrides applied.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub file: ExperimentFile,
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
    pub trajectory_path: PathBuf,
}

impl Experiment {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Experiment::from_file(file, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Experiment::from_toml(&text, &base)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(e))))
    }

    fn from_file(file: ExperimentFile, base_dir: &Path) -> Result<Self> {
        let mut exp = Experiment {
            file,
            base_dir: base_dir.to_path_buf(),
            output_dir: PathBuf::new(),
            trajectory_path: PathBuf::new(),
        };
        exp.validate()?;
        exp.resolve_paths(None);
        Ok(exp)
    }

    fn validate(&self) -> Result<()> {
        let f = &self.file;
        match (&f.algorithm, &f.algorithms) {
            (Some(_), None) => {}
            (None, Some(list)) if !list.is_empty() => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of `algorithm` or a non-empty `algorithms` list is required".into(),
                ))
            }
        }
        match (f.model.kind, f.model.hidden.is_empty()) {
            (ModelKind::SoftmaxRegression, false) => {
                return Err(Error::Config("model.hidden must be empty for softmax_regression".into()))
            }
            (ModelKind::Mlp, true) => return Err(Error::Config("model.hidden is required for mlp".into())),
            _ => {}
        }
        if f.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, output: Option<PathBuf>) {
        if let Some(s) = seed {
            self.file.seed = s;
        }
        self.resolve_paths(output);
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn resolve_paths(&mut self, output: Option<PathBuf>) {
        self.output_dir = match output {
            Some(o) => o,
            None => self.resolve(self.file.paths.output_dir.as_deref().unwrap_or(Path::new("out"))),
        };
        self.trajectory_path = match &self.file.paths.trajectory_path {
            Some(p) => self.resolve(p),
            None => self.output_dir.join(format!("trajectory-seed{}.mft", self.file.seed)),
        };
    }

    fn dataset_path(&self, name: &str) -> PathBuf {
        let dir = self
            .file
            .paths
            .dataset_dir
            .as_deref()
            .map(|d| self.resolve(d))
            .unwrap_or_else(|| self.base_dir.clone());
        dir.join(name)
    }

    pub fn algorithms(&self) -> Vec<Algorithm> {
        match (&self.file.algorithm, &self.file.algorithms) {
            (Some(a), _) => vec![*a],
            (None, Some(list)) => list.clone(),
            (None, None) => Vec::new(),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.file.partition.scheme(),
            num_clients: self.file.partition.clients(),
            seed: self.file.seed,
        }
    }

    /// Train and test sets.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.file.data {
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_size,
                test_size,
                split_seed,
            } => {
                let train = data::load_idx(&self.dataset_path(train_images), &self.dataset_path(train_labels))?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = data::load_idx(&self.dataset_path(ti), &self.dataset_path(tl))?;
                        let train = match train_size {
                            Some(n) => train.split(*n, train.len() - n, *split_seed)?.0,
                            None => train,
                        };
                        let test = match test_size {
                            Some(n) => test.split(*n, test.len() - n, *split_seed)?.0,
                            None => test,
                        };
                        Ok((train, test))
                    }
                    (None, None) => {
                        let n_test = test_size.unwrap_or(train.len() / 5);
                        let n_train = train_size.unwrap_or(train.len() - n_test);
                        train.split(n_train, n_test, *split_seed)
                    }
                    _ => Err(Error::Config("test_images and test_labels must be given together".into())),
                }
            }
            DataSection::Synthetic {
                classes,
                per_class,
                input_dim,
                separation,
                train_size,
                test_size,
                split_seed,
            } => {
                let mut rng = RngStream::new(*split_seed, streams::SYNTHETIC);
                let ds = data::make_synthetic(*classes, *per_class, *input_dim, *separation, &mut rng)?;
                ds.split(*train_size, *test_size, *split_seed)
            }
        }
    }

    pub fn federated_data(&self) -> Result<FederatedData> {
        let (train, test) = self.load_data()?;
        FederatedData::new(train, test, &self.partition_spec())
    }

    pub fn model_spec(&self, data: &FederatedData) -> Result<ModelSpec> {
        let input_dim = data.train.input_dim();
        let classes = data.train.num_classes.max(data.test.num_classes);
        if data.test.input_dim() != input_dim {
            return Err(Error::Config("train and test inputs differ in dimension".into()));
        }
        let spec = match self.file.model.kind {
            ModelKind::SoftmaxRegression => ModelSpec::softmax_regression(input_dim, classes),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.file.model.hidden.clone(), classes),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rate_config(&self) -> RateSolveConfig {
        let s = self.file.meanfield.solver;
        RateSolveConfig {
            beta: self.file.beta,
            inner_tol: s.inner_tol,
            inner_max_iters: s.inner_max_iters,
            damping: s.damping,
        }
    }

    pub fn training_config(&self, algorithm: Algorithm, model: ModelSpec) -> TrainingConfig {
        let f = &self.file;
        TrainingConfig {
            algorithm,
            model,
            partition: self.partition_spec(),
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            base_lr: f.base_lr,
            beta: f.beta,
            gamma: f.gamma,
            sample_fraction: f.sample_fraction,
            seed: f.seed,
            algo_params: f.algo,
            rate: self.rate_config(),
            bound_d: f.bounds.d,
            bound_trials: f.bounds.trials,
            bound_radius: f.bounds.radius,
        }
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct PrecomputeOutcome {
    pub trajectory: MeanFieldTrajectory,
    pub path: PathBuf,
}

pub fn precompute(exp: &Experiment) -> Result<PrecomputeOutcome> {
    if !exp.algorithms().iter().any(|a| a.needs_trajectory()) {
        return Err(Error::Config("precompute needs fedent or fednorm among the algorithms".into()));
    }
    let data = exp.federated_data()?;
    let spec = exp.model_spec(&data)?;
    let tc = exp.training_config(Algorithm::FedEnt, spec.clone());
    tc.validate()?;
    let w0 = engine::initial_params(&tc);
    let mf = &exp.file.meanfield;
    let dynamics = ModelDynamics::new(
        &spec,
        &data.train,
        &data.partitions,
        exp.file.rounds,
        mf.batch_size.unwrap_or(exp.file.batch_size),
        exp.file.seed,
    )?;
    let cfg = FixedPointConfig {
        horizon: exp.file.rounds,
        rate: exp.rate_config(),
        eps1: mf.eps1,
        eps2: mf.eps2,
        max_outer: mf.max_outer,
    };
    let trajectory = meanfield::fixed_point(&dynamics, &w0, &cfg)?;
    if let Some(dir) = exp.trajectory_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    trajectory.save(&exp.trajectory_path)?;
    Ok(PrecomputeOutcome {
        trajectory,
        path: exp.trajectory_path.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(histories: &[RunHistory]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for h in histories {
        for r in &h.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                h.algorithm,
                h.seed,
                r.train_loss,
                r.test_accuracy,
                r.mean_eta,
                r.entropy,
                r.max_drift,
                fmt_opt(r.drift_bound),
                r.eta_bound_violations
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
    pub accuracy_curve: Vec<f64>,
    pub bound_d: Option<f64>,
    pub eta_bound_violations: usize,
    pub drift_bound_violations: usize,
    pub round_gap_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub rounds: usize,
    pub runs: Vec<RunSummary>,
}

pub fn summarize(seed: u64, rounds: usize, histories: &[RunHistory]) -> Summary {
    let runs = histories
        .iter()
        .map(|h| {
            let count = |f: &dyn Fn(&engine::RoundRecord) -> Option<bool>| {
                h.records.iter().filter(|r| f(r) == Some(false)).count()
            };
            RunSummary {
                algorithm: h.algorithm,
                final_accuracy: h.final_accuracy(),
                final_train_loss: h.records.last().map_or(f64::NAN, |r| r.train_loss),
                accuracy_curve: h.records.iter().map(|r| r.test_accuracy).collect(),
                bound_d: h.bound_d,
                eta_bound_violations: h.total_violations(),
                drift_bound_violations: count(&|r| r.drift_bound.map(|b| r.max_drift < b + BOUND_SLACK)),
                round_gap_violations: count(&|r| r.round_gap_bound.map(|b| r.param_change <= b + BOUND_SLACK)),
            }
        })
        .collect();
    Summary { seed, rounds, runs }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub histories: Vec<RunHistory>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

pub fn run(exp: &Experiment) -> Result<RunOutcome> {
    let algorithms = exp.algorithms();
    let trajectory = if algorithms.iter().any(|a| a.needs_trajectory()) {
        if !exp.trajectory_path.exists() {
            return Err(Error::Config(format!(
                "trajectory file {} not found; run `precompute` first",
                exp.trajectory_path.display()
            )));
        }
        Some(MeanFieldTrajectory::load(&exp.trajectory_path, exp.file.beta)?)
    } else {
        None
    };
    let data = exp.federated_data()?;
    let spec = exp.model_spec(&data)?;
    let mut histories = Vec::with_capacity(algorithms.len());
    for algo in algorithms {
        let tc = exp.training_config(algo, spec.clone());
        let traj = if algo.needs_trajectory() {
            trajectory.as_ref()
        } else {
            None
        };
        histories.push(engine::run_experiment(&tc, &data, traj)?);
    }
    std::fs::create_dir_all(&exp.output_dir)?;
    let metrics_path = exp.output_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&histories))?;
    let summary = summarize(exp.file.seed, exp.file.rounds, &histories);
    let summary_path = exp.output_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&summary_path, json + "\n")?;
    Ok(RunOutcome {
        histories,
        metrics_path,
        summary_path,
        summary,
    })
}

pub fn partition_csv(dataset: &LabeledDataset, parts: &[data::ClientPartition]) -> String {
    let mut out = String::from("client_id,class,count\n");
    for (p, h) in parts.iter().zip(label_histograms(dataset, parts)) {
        for (class, count) in h.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", p.client_id, class, count);
        }
    }
    out
}

pub fn inspect_partition(exp: &Experiment) -> Result<PathBuf> {
    let data = exp.federated_data()?;
    std::fs::create_dir_all(&exp.output_dir)?;
    let path = exp.output_dir.join("partition.csv");
    std::fs::write(&path, partition_csv(&data.train, &data.partitions))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub d_hat: f64,
    pub l_hat: f64,
    pub trials: usize,
    pub anchors: usize,
    pub radius: f64,
}

/// Probes every client's loss at the initial model and, when a trajectory
/// file exists, at each of its first-estimator points.
pub fn estimate_bounds(exp: &Experiment) -> Result<BoundsReport> {
    let data = exp.federated_data()?;
    let spec = exp.model_spec(&data)?;
    let tc = exp.training_config(Algorithm::FedAvg, spec.clone());
    let mut anchors = vec![engine::initial_params(&tc)];
    if exp.trajectory_path.exists() {
        let traj = MeanFieldTrajectory::load(&exp.trajectory_path, exp.file.beta)?;
        if traj.dim() != spec.param_count() {
            return Err(Error::TrajectoryMismatch("trajectory dimension differs from the model".into()));
        }
        anchors.extend(traj.phi1.iter().skip(1).cloned());
    }
    let trials = if exp.file.bounds.trials == 0 {
        anchors.len()
    } else {
        exp.file.bounds.trials
    };
    let est = engine::estimate_client_bounds(
        &spec,
        &data.client_batches()?,
        &anchors,
        trials,
        exp.file.bounds.radius,
        exp.file.seed,
    )?;
    let report = BoundsReport {
        d_hat: est.d_hat,
        l_hat: est.l_hat,
        trials,
        anchors: anchors.len(),
        radius: exp.file.bounds.radius,
    };
    std::fs::create_dir_all(&exp.output_dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(exp.output_dir.join("bounds.json"), json + "\n")?;
    Ok(report)
}

fn load(args: &CommonArgs) -> Result<Experiment> {
    let mut exp = Experiment::load(&args.config)?;
    exp.apply_overrides(args.seed, args.output.clone());
    Ok(exp)
}

/// Runs one verb and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Precompute(args) => load(args).and_then(|exp| precompute(&exp)).map(|o| {
            let t = &o.trajectory;
            println!(
                "outer iterations {}  converged {}  gaps phi1 {:e} phi2 {:e}",
                t.outer_iterations, t.converged, t.final_gap.0, t.final_gap.1
            );
            println!("wrote {}", o.path.display());
            if t.converged {
                EXIT_OK
            } else {
                eprintln!("fixed point not reached within max_outer");
                EXIT_NOT_CONVERGED
            }
        }),
        Command::Run(args) => load(args).and_then(|exp| run(&exp)).map(|o| {
            for (h, s) in o.histories.iter().zip(&o.summary.runs) {
                println!(
                    "{:<8} final accuracy {:.4}  rate-bound violations {}  ({:.1}s)",
                    h.algorithm,
                    s.final_accuracy,
                    s.eta_bound_violations,
                    h.elapsed.as_secs_f64()
                );
            }
            println!("wrote {} and {}", o.metrics_path.display(), o.summary_path.display());
            EXIT_OK
        }),
        Command::InspectPartition(args) => load(args).and_then(|exp| inspect_partition(&exp)).map(|p| {
            println!("wrote {}", p.display());
            EXIT_OK
        }),
        Command::EstimateBounds(args) => load(args).and_then(|exp| estimate_bounds(&exp)).map(|r| {
            println!("D_hat {}  L_hat {}  ({} trials over {} anchors)", r.d_hat, r.l_hat, r.trials, r.anchors);
            EXIT_OK
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "fedavg"
rounds = 3

[model]
kind = "softmax_regression"

[data]
source = "synthetic"
classes = 2
per_class = 30
input_dim = 2
separation = 3.0
train_size = 40
test_size = 20

[partition]
clients = 4
scheme = "iid"
"#;

    #[test]
    fn defaults_are_applied() {
        let exp = Experiment::from_toml(MINIMAL, Path::new("/tmp/x")).unwrap();
        let f = &exp.file;
        assert_eq!((f.local_epochs, f.batch_size), (1, 32));
        assert_eq!((f.meanfield.eps1, f.meanfield.eps2), (1e-3, 1e-3));
        assert_eq!(f.meanfield.max_outer, 200);
        assert_eq!(exp.output_dir, Path::new("/tmp/x/out"));
        assert_eq!(exp.trajectory_path, Path::new("/tmp/x/out/trajectory-seed0.mft"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("rounds = 3", "rounds = 3\nrouns = 4");
        let err = Experiment::from_toml(&text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("rouns"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn partition_fields_must_match_scheme() {
        let text = MINIMAL.replace("scheme = \"iid\"", "scheme = \"dirichlet\"");
        assert!(Experiment::from_toml(&text, Path::new(".")).is_err());
        let text = MINIMAL.replace("scheme = \"iid\"", "scheme = \"iid\"\nalpha_d = 1.0");
        assert!(Experiment::from_toml(&text, Path::new(".")).is_err());
        let text = MINIMAL.replace("scheme = \"iid\"", "scheme = \"dirichlet\"\nalpha_d = 0.5");
        assert!(Experiment::from_toml(&text, Path::new(".")).is_ok());
    }

    #[test]
    fn seed_override_moves_default_trajectory() {
        let mut exp = Experiment::from_toml(MINIMAL, Path::new("/d")).unwrap();
        exp.apply_overrides(Some(7), Some(PathBuf::from("/o")));
        assert_eq!(exp.file.seed, 7);
        assert_eq!(exp.trajectory_path, Path::new("/o/trajectory-seed7.mft"));
    }
}
