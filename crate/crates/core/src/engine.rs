//! Federated training rounds for FedEnt and the baselines.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::data::{partition, ClientPartition, LabeledDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::meanfield::{
    decay_lr, entropy_shares, lr_upper_bound, solve_learning_rate, system_entropy,
    MeanFieldTrajectory, RateSolveConfig,
};
use crate::models::{self, estimate_bounds, Batch, ModelSpec, SmoothnessEstimate};
use crate::numerics::{dot, l2norm, streams, ParamVector, RngStream};

/// Stream under which initial model parameters are drawn.
pub const INIT_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedEnt,
    FedAvg,
    FedAdam,
    FedProx,
    FedDyn,
    FedCos,
    FedNorm,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedEnt => "fedent",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAdam => "fedadam",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedDyn => "feddyn",
            Algorithm::FedCos => "fedcos",
            Algorithm::FedNorm => "fednorm",
        }
    }

    pub fn needs_trajectory(self) -> bool {
        matches!(self, Algorithm::FedEnt | Algorithm::FedNorm)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoParams {
    pub mu: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub server_lr: f64,
}

impl Default for AlgoParams {
    fn default() -> Self {
        AlgoParams {
            mu: 0.01,
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            server_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sample_fraction: f64,
    pub seed: u64,
    pub algo_params: AlgoParams,
    pub rate: RateSolveConfig,
    /// Gradient bound used for the rate-bound and drift diagnostics. Estimated
    /// from the trajectory when absent.
    pub bound_d: Option<f64>,
    pub bound_trials: usize,
    pub bound_radius: f64,
}

impl TrainingConfig {
    pub fn new(algorithm: Algorithm, model: ModelSpec, partition: PartitionSpec) -> Self {
        TrainingConfig {
            algorithm,
            model,
            partition,
            rounds: 10,
            local_epochs: 1,
            batch_size: 32,
            base_lr: 0.01,
            beta: 0.99,
            gamma: 0.99,
            sample_fraction: 1.0,
            seed: partition.seed,
            algo_params: AlgoParams::default(),
            rate: RateSolveConfig::default(),
            bound_d: None,
            bound_trials: 0,
            bound_radius: 1e-3,
        }
    }

    pub fn sampled_clients(&self) -> usize {
        (self.sample_fraction * self.partition.num_clients as f64 - 1e-9).ceil() as usize
    }

    pub fn rate_config(&self) -> RateSolveConfig {
        RateSolveConfig {
            beta: self.beta,
            ..self.rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("rounds, local_epochs and batch_size must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::invalid("sample_fraction must lie in (0, 1]"));
        }
        if self.sampled_clients() == 0 {
            return Err(Error::invalid("sample_fraction * N must be at least 1"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1]"));
        }
        self.rate_config().validate()
    }
}

/// Training and test data with the client split of the training set.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partitions: Vec<ClientPartition>,
}

impl FederatedData {
    pub fn new(train: LabeledDataset, test: LabeledDataset, spec: &PartitionSpec) -> Result<Self> {
        let partitions = partition(&train, spec)?;
        Ok(FederatedData {
            train,
            test,
            partitions,
        })
    }

    pub fn client_batches(&self) -> Result<Vec<Batch>> {
        self.partitions
            .iter()
            .map(|p| self.train.examples.select(&p.indices))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub theta: f64,
    pub data: Batch,
    pub local_params: ParamVector,
    pub eta_history: Vec<f64>,
    /// Last rate before blending, used to warm-start the next solve.
    pub last_solved: f64,
    pub feddyn_h: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: ParamVector,
    pub adam_m: Option<ParamVector>,
    pub adam_v: Option<ParamVector>,
    pub round: usize,
}

impl ServerState {
    pub fn new(global_params: ParamVector) -> Self {
        ServerState {
            global_params,
            adam_m: None,
            adam_v: None,
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub mean_eta: f64,
    pub entropy: f64,
    pub max_drift: f64,
    /// Absent without a trajectory.
    pub drift_bound: Option<f64>,
    pub eta_bound_violations: usize,
    /// `|w(t+1) - w(t)|`
    pub param_change: f64,
    pub round_gap_bound: Option<f64>,
}

/// Parameters visited in one round, kept only on request.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub global_before: ParamVector,
    pub global_after: ParamVector,
    pub sampled: Vec<usize>,
    pub locals: Vec<ParamVector>,
    pub etas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunHistory {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
    pub bound_d: Option<f64>,
    pub trace: Vec<RoundTrace>,
    pub elapsed: Duration,
}

impl RunHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_accuracy)
    }

    pub fn total_violations(&self) -> usize {
        self.records.iter().map(|r| r.eta_bound_violations).sum()
    }
}

/// `sum theta_i w_i`.
pub fn aggregate(locals: &[ParamVector], theta: &[f64]) -> Result<ParamVector> {
    if locals.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            left: locals.len(),
            right: theta.len(),
        });
    }
    let first = locals
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let mut out = ParamVector::zeros(first.len());
    for (w, &t) in locals.iter().zip(theta) {
        out.add_scaled(t, w)?;
    }
    Ok(out)
}

/// Weights rescaled to sum to one.
pub fn renormalize(theta: &[f64]) -> Vec<f64> {
    let total: f64 = theta.iter().sum();
    theta.iter().map(|t| t / total).collect()
}

/// Cosine similarity with the global model, floored at zero, times the data
/// weight, renormalised. Falls back to `theta` when every weight vanishes.
pub fn fedcos_weights(locals: &[ParamVector], global_w: &ParamVector, theta: &[f64]) -> Result<Vec<f64>> {
    if locals.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            left: locals.len(),
            right: theta.len(),
        });
    }
    let gn = l2norm(global_w);
    let mut raw = Vec::with_capacity(locals.len());
    for (w, &t) in locals.iter().zip(theta) {
        let wn = l2norm(w);
        let cos = if wn > 0.0 && gn > 0.0 {
            (dot(w, global_w)? / (wn * gn)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        raw.push(t * cos.max(0.0));
    }
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Ok(raw.iter().map(|r| r / total).collect())
    } else {
        Ok(renormalize(theta))
    }
}

/// One-step minimiser of the norm-penalised objective, clamped to `[0, 1]`.
pub fn fednorm_rate(grad: &ParamVector, phi1_t: &ParamVector, phi1_next: &ParamVector, beta: f64) -> Result<f64> {
    let diff = phi1_t.sub(phi1_next)?;
    let num = beta * dot(&diff, grad)?;
    let den = (1.0 - beta) + beta * grad.squared_norm();
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Local objective modifiers applied on top of the plain loss gradient.
#[derive(Debug, Clone, Copy)]
pub enum LocalRule<'a> {
    Sgd,
    Prox { mu: f64 },
    Dyn { alpha: f64, h: &'a ParamVector },
}

impl<'a> LocalRule<'a> {
    pub fn for_algorithm(algo: Algorithm, params: &AlgoParams, h: Option<&'a ParamVector>) -> Self {
        match (algo, h) {
            (Algorithm::FedProx, _) => LocalRule::Prox { mu: params.mu },
            (Algorithm::FedDyn, Some(h)) => LocalRule::Dyn {
                alpha: params.alpha,
                h,
            },
            _ => LocalRule::Sgd,
        }
    }
}

/// `epochs` passes of mini-batch SGD starting from `global_w`. Each epoch
/// visits a fresh shuffle of the client's examples; indices inside a batch are
/// kept in dataset order.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    spec: &ModelSpec,
    data: &Batch,
    rule: LocalRule<'_>,
    global_w: &ParamVector,
    eta: f64,
    epochs: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    if !(eta >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut w = global_w.clone();
    if eta == 0.0 {
        return Ok(w);
    }
    let n = data.len();
    let full = batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        if !full {
            rng.shuffle(&mut order);
        }
        for chunk in order.chunks(batch_size) {
            let mut g = if full {
                models::gradient(spec, &w, data)?
            } else {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                models::gradient(spec, &w, &data.select(&idx)?)?
            };
            match rule {
                LocalRule::Sgd => {}
                LocalRule::Prox { mu } => {
                    if mu != 0.0 {
                        g.add_scaled(mu, &w.sub(global_w)?)?;
                    }
                }
                LocalRule::Dyn { alpha, h } => {
                    g.add_scaled(-1.0, h)?;
                    if alpha != 0.0 {
                        g.add_scaled(alpha, &w.sub(global_w)?)?;
                    }
                }
            }
            w.add_scaled(-eta, &g)?;
        }
    }
    Ok(w)
}

/// New global parameters from the aggregate. FedAdam takes an adaptive step
/// on the pseudo-gradient; every other algorithm adopts the aggregate.
pub fn server_update(
    algo: Algorithm,
    server: &ServerState,
    aggregated: ParamVector,
    params: &AlgoParams,
) -> Result<ServerState> {
    if aggregated.len() != server.global_params.len() {
        return Err(Error::DimensionMismatch {
            left: aggregated.len(),
            right: server.global_params.len(),
        });
    }
    if algo != Algorithm::FedAdam {
        return Ok(ServerState {
            global_params: aggregated,
            adam_m: server.adam_m.clone(),
            adam_v: server.adam_v.clone(),
            round: server.round + 1,
        });
    }
    let d = aggregated.len();
    let delta = aggregated.sub(&server.global_params)?;
    let mut m = server.adam_m.clone().unwrap_or_else(|| ParamVector::zeros(d));
    let mut v = server.adam_v.clone().unwrap_or_else(|| ParamVector::zeros(d));
    let mut w = server.global_params.clone();
    {
        let (ms, vs, ws) = (m.as_mut_slice(), v.as_mut_slice(), w.as_mut_slice());
        for (k, &dk) in delta.as_slice().iter().enumerate() {
            ms[k] = params.beta1 * ms[k] + (1.0 - params.beta1) * dk;
            vs[k] = params.beta2 * vs[k] + (1.0 - params.beta2) * dk * dk;
            ws[k] += params.server_lr * ms[k] / (vs[k].sqrt() + params.tau);
        }
    }
    Ok(ServerState {
        global_params: w,
        adam_m: Some(m),
        adam_v: Some(v),
        round: server.round + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Argmax accuracy (ties go to the lowest class) and mean cross-entropy.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, test: &Batch) -> Result<Evaluation> {
    let m = spec.num_classes;
    let logits = models::logits(spec, params, test)?;
    let correct = logits
        .chunks(m)
        .zip(test.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        loss: models::loss(spec, params, test)?,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Initial global parameters for a configuration.
pub fn initial_params(config: &TrainingConfig) -> ParamVector {
    config
        .model
        .init_params(&mut RngStream::new(config.seed, INIT_STREAM))
}

/// Gradient and smoothness bounds over all clients, probed at `anchors`.
pub fn estimate_client_bounds(
    spec: &ModelSpec,
    clients: &[Batch],
    anchors: &[ParamVector],
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    let root = RngStream::new(seed, streams::BOUND_PROBES);
    let mut best = SmoothnessEstimate {
        d_hat: 0.0,
        l_hat: 0.0,
        trials,
    };
    for (i, data) in clients.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let est = estimate_bounds(spec, data, anchors, trials, radius, &mut rng)?;
        best.d_hat = best.d_hat.max(est.d_hat);
        best.l_hat = best.l_hat.max(est.l_hat);
    }
    Ok(best)
}

fn check_trajectory(
    config: &TrainingConfig,
    data: &FederatedData,
    trajectory: Option<&MeanFieldTrajectory>,
    w0: &ParamVector,
) -> Result<()> {
    let needs = config.algorithm.needs_trajectory();
    let traj = match (needs, trajectory) {
        (true, None) => {
            return Err(Error::TrajectoryMismatch(format!(
                "{} needs a precomputed trajectory",
                config.algorithm
            )))
        }
        (false, Some(_)) => {
            return Err(Error::TrajectoryMismatch(format!(
                "{} does not use a trajectory",
                config.algorithm
            )))
        }
        (false, None) => return Ok(()),
        (true, Some(t)) => t,
    };
    let mismatch = |msg: String| Err(Error::TrajectoryMismatch(msg));
    if traj.dim() != w0.len() {
        return mismatch(format!("dimension {} vs model {}", traj.dim(), w0.len()));
    }
    if traj.num_clients() != data.partitions.len() {
        return mismatch(format!(
            "{} clients vs {} partitions",
            traj.num_clients(),
            data.partitions.len()
        ));
    }
    if traj.horizon() < config.rounds {
        return mismatch(format!("horizon {} shorter than {} rounds", traj.horizon(), config.rounds));
    }
    if traj.phi1[0] != *w0 {
        return mismatch("initial estimator differs from the initial model".into());
    }
    Ok(())
}

pub fn run_experiment(
    config: &TrainingConfig,
    data: &FederatedData,
    trajectory: Option<&MeanFieldTrajectory>,
) -> Result<RunHistory> {
    run_experiment_with(config, data, trajectory, false)
}

/// Runs all rounds. With `keep_trace` the visited global and local
/// parameters of every round are returned as well.
pub fn run_experiment_with(
    config: &TrainingConfig,
    data: &FederatedData,
    trajectory: Option<&MeanFieldTrajectory>,
    keep_trace: bool,
) -> Result<RunHistory> {
    let started = Instant::now();
    config.validate()?;
    let spec = &config.model;
    if data.partitions.len() != config.partition.num_clients {
        return Err(Error::invalid(format!(
            "{} partitions for {} configured clients",
            data.partitions.len(),
            config.partition.num_clients
        )));
    }
    let w0 = initial_params(config);
    check_trajectory(config, data, trajectory, &w0)?;
    let rate_cfg = config.rate_config();
    let n = data.partitions.len();
    let batches = data.client_batches()?;

    let bound_d = match (config.bound_d, trajectory) {
        (Some(d), _) => Some(d),
        (None, Some(traj)) => {
            let anchors = &traj.phi1[..=config.rounds];
            let trials = if config.bound_trials == 0 {
                anchors.len()
            } else {
                config.bound_trials
            };
            let est = estimate_client_bounds(
                spec,
                &batches,
                anchors,
                trials,
                config.bound_radius,
                config.seed,
            )?;
            Some(est.d_hat)
        }
        (None, None) => None,
    };

    let theta_all: Vec<f64> = data.partitions.iter().map(|p| p.theta).collect();
    let mut clients: Vec<ClientState> = data
        .partitions
        .iter()
        .zip(batches)
        .map(|(p, batch)| ClientState {
            client_id: p.client_id,
            theta: p.theta,
            data: batch,
            local_params: w0.clone(),
            eta_history: Vec::new(),
            last_solved: 0.0,
            feddyn_h: (config.algorithm == Algorithm::FedDyn).then(|| ParamVector::zeros(w0.len())),
        })
        .collect();
    // eta_i(t - 1), seeded with the base rate
    let mut eta_prev = vec![config.base_lr; n];
    let mut server = ServerState::new(w0);
    let sampling = RngStream::new(config.seed, streams::SERVER_SAMPLING);
    let training = RngStream::new(config.seed, streams::LOCAL_TRAINING);
    let rate_batches = RngStream::new(config.seed, streams::RATE_BATCHES);
    let m = config.sampled_clients();
    let mut records = Vec::with_capacity(config.rounds);
    let mut trace = Vec::new();

    for t in 0..config.rounds {
        let round_key = (t as u64) << 32;
        let sampled = if m == n {
            (0..n).collect()
        } else {
            sampling.derive(t as u64).sample_without_replacement(n, m)
        };
        let global = server.global_params.clone();
        let mut locals = Vec::with_capacity(m);
        let mut etas = Vec::with_capacity(m);
        let mut violations = 0;
        let mut grad_norms = Vec::with_capacity(m);

        for &i in &sampled {
            let client = &mut clients[i];
            let eta = match (config.algorithm, trajectory) {
                (Algorithm::FedEnt | Algorithm::FedNorm, Some(traj)) => {
                    let mut rng = rate_batches.derive(round_key | i as u64);
                    let g = if config.batch_size >= client.data.len() {
                        models::gradient(spec, &global, &client.data)?
                    } else {
                        let idx = rng.sample_without_replacement(client.data.len(), config.batch_size);
                        models::gradient(spec, &global, &client.data.select(&idx)?)?
                    };
                    grad_norms.push(l2norm(&g));
                    let solved = if config.algorithm == Algorithm::FedEnt {
                        let phi2_next = traj.phi2[t + 1];
                        let eta_new = solve_learning_rate(
                            client.theta,
                            &g,
                            &traj.phi1[t],
                            phi2_next,
                            &rate_cfg,
                            client.last_solved,
                        )?;
                        if let Some(d) = bound_d {
                            let bound = lr_upper_bound(
                                client.theta,
                                config.beta,
                                d,
                                l2norm(&traj.phi1[t]),
                                phi2_next,
                            );
                            if eta_new > bound + 1e-12 {
                                violations += 1;
                            }
                        }
                        eta_new
                    } else {
                        fednorm_rate(&g, &traj.phi1[t], &traj.phi1[t + 1], config.beta)?
                    };
                    client.last_solved = solved;
                    decay_lr(eta_prev[i], solved, config.gamma)
                }
                _ => config.base_lr,
            };
            eta_prev[i] = eta;
            client.eta_history.push(eta);

            let rule = LocalRule::for_algorithm(config.algorithm, &config.algo_params, client.feddyn_h.as_ref());
            let mut rng = training.derive(round_key | i as u64);
            let w = local_update(
                spec,
                &client.data,
                rule,
                &global,
                eta,
                config.local_epochs,
                config.batch_size,
                &mut rng,
            )?;
            if !w.is_finite() {
                return Err(Error::non_finite(format!(
                    "local parameters in round {t}, client {i}"
                )));
            }
            if let Some(h) = client.feddyn_h.as_mut() {
                h.add_scaled(-config.algo_params.alpha, &w.sub(&global)?)?;
            }
            client.local_params = w.clone();
            locals.push(w);
            etas.push(eta);
        }

        let theta_sampled = renormalize(&sampled.iter().map(|&i| theta_all[i]).collect::<Vec<_>>());
        let weights = if config.algorithm == Algorithm::FedCos {
            fedcos_weights(&locals, &global, &theta_sampled)?
        } else {
            theta_sampled.clone()
        };
        let aggregated = aggregate(&locals, &weights)?;
        server = server_update(config.algorithm, &server, aggregated, &config.algo_params)?;
        let after = &server.global_params;
        if !after.is_finite() {
            return Err(Error::non_finite(format!("global parameters after round {t}")));
        }

        let train_loss = models::loss(spec, after, &data.train.examples)?;
        let test_accuracy = evaluate(spec, after, &data.test.examples)?.accuracy;
        let entropy = entropy_shares(&locals, &theta_sampled, None)
            .map(|s| system_entropy(&s))
            .unwrap_or(f64::NAN);
        let drifts = analysis::drift(after, &locals)?;
        let max_drift = drifts.iter().copied().fold(0.0, f64::max);
        let (drift_bound, round_gap_bound) = match (trajectory, bound_d) {
            (Some(traj), Some(d)) => {
                let phi1_norm = l2norm(&traj.phi1[t]);
                (
                    Some(analysis::drift_bound_g(&theta_all, config.beta, d, phi1_norm, traj.phi2[t + 1])),
                    Some(analysis::round_gap_bound(
                        &theta_all,
                        config.beta,
                        d,
                        phi1_norm,
                        traj.phi2[t + 1],
                        None,
                    )),
                )
            }
            _ => (None, None),
        };
        records.push(RoundRecord {
            round: t,
            train_loss,
            test_accuracy,
            mean_eta: etas.iter().sum::<f64>() / etas.len() as f64,
            entropy,
            max_drift,
            drift_bound,
            eta_bound_violations: violations,
            param_change: l2norm(&after.sub(&global)?),
            round_gap_bound,
        });
        if keep_trace {
            trace.push(RoundTrace {
                global_before: global,
                global_after: after.clone(),
                sampled,
                locals,
                etas,
            });
        }
    }

    Ok(RunHistory {
        algorithm: config.algorithm,
        seed: config.seed,
        records,
        final_params: server.global_params,
        bound_d,
        trace,
        elapsed: started.elapsed(),
    })
}
