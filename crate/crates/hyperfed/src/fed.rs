//! Round-based federated training engine: local mini-batch SGD, four
//! aggregation strategies, deterministic client sampling, per-round
//! diagnostics, and optional closed-form classifier calibration.

use crate::calibration::{client_stats, server_solve, CalibratedHead, CalibStats};
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{
    classifier_alignment, cost_ffc_flops, cost_trainable_head_flops, AlignmentStats, CostLedger,
};
use crate::model::{
    backward, forward, lr_schedule, sgd_step, trace_loss, LossKind, ModelParams, Schedule,
};
use crate::numerics::{Matrix, Rng};

/// Wire width used by the cost ledger (f32 transport convention).
pub const BYTES_PER_PARAM: u64 = 4;

// Distinct RNG streams so sampling, training, and data handling never
// share a generator.
const STREAM_SAMPLE: u64 = 0x5a3c_0001;
const STREAM_TRAIN: u64 = 0x5a3c_0002;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "name")]
pub enum Strategy {
    FedAvg,
    FedProx { mu: f64 },
    FedNova,
    FedOpt { server_lr: f64, server_momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "plan")]
pub enum CalibrationPlan {
    /// Never calibrate.
    Off,
    /// Calibrate once after the last round and attach the result.
    Final,
    /// Re-fit and replace the classifier every `interval` rounds (training
    /// continues with the calibrated weights), plus a final pass.
    Every { interval: usize },
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub loss: LossKind,
    pub strategy: Strategy,
    /// Fraction of clients drawn each round, in (0, 1].
    pub participation: f64,
    pub seed: u64,
    pub calibration: CalibrationPlan,
    /// Ridge strength for calibration solves.
    pub lambda: f64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Parameter(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::Parameter(format!(
                "base learning rate must be >= 0, got {}",
                self.base_lr
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        match self.strategy {
            Strategy::FedProx { mu } if !(mu >= 0.0) => {
                return Err(Error::Parameter(format!("mu must be >= 0, got {mu}")));
            }
            Strategy::FedOpt {
                server_lr,
                server_momentum,
            } if !(server_lr > 0.0) || !(0.0..1.0).contains(&server_momentum) => {
                return Err(Error::Parameter(
                    "server_lr must be > 0 and server_momentum in [0, 1)".into(),
                ));
            }
            _ => {}
        }
        if let CalibrationPlan::Every { interval } = self.calibration {
            if interval == 0 {
                return Err(Error::Parameter("calibration interval must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Result of one client's local pass.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    /// Flat parameters after local training (fixed head excluded).
    pub params: Vec<f64>,
    /// Local step count: epochs * ceil(n / batch).
    pub tau: u64,
    /// Mean training loss across local steps (initial loss when tau = 0).
    pub mean_loss: f64,
    /// Classifier snapshot for cross-client disparity metrics.
    pub head: Matrix,
    pub n: usize,
}

/// Train one client for `local_epochs` epochs starting from the global
/// model. Shuffles are seeded by (seed, round, client, epoch), so the
/// outcome depends only on the configuration.
pub fn local_train(
    global: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    cfg: &FedConfig,
    lr: f64,
    round: usize,
    client: usize,
) -> Result<LocalOutcome> {
    use rand::seq::SliceRandom;
    let mut local = global.clone();
    let mut p = local.flatten();
    let n_params = p.len();
    let mut velocity = vec![0.0; n_params];
    let anchor = match cfg.strategy {
        Strategy::FedProx { .. } => Some(p.clone()),
        _ => None,
    };
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    for &i in &sorted {
        if i >= ds.len() {
            return Err(Error::Consistency(format!("sample index {i} out of range")));
        }
    }
    let rng = Rng::with_stream(cfg.seed, STREAM_TRAIN)
        .derive(round as u64)
        .derive(client as u64);
    let mut steps = 0u64;
    let mut loss_sum = 0.0;
    for epoch in 0..cfg.local_epochs {
        let mut order = sorted.clone();
        order.shuffle(&mut rng.derive(epoch as u64));
        for chunk in order.chunks(cfg.batch) {
            let mut grad = vec![0.0; n_params];
            let mut chunk_loss = 0.0;
            for &i in chunk {
                let trace = forward(&local.extractor, &local.head, ds.features.row(i))?;
                chunk_loss += trace_loss(&trace, ds.labels[i], cfg.loss);
                let g = backward(&local.extractor, &local.head, &trace, ds.labels[i], cfg.loss);
                let flat = local.flatten_grads(&g);
                for (a, b) in grad.iter_mut().zip(&flat) {
                    *a += b;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in &mut grad {
                *g *= inv;
            }
            if let Strategy::FedProx { mu } = cfg.strategy {
                let anchor = anchor.as_ref().unwrap();
                for i in 0..n_params {
                    grad[i] += mu * (p[i] - anchor[i]);
                }
            }
            sgd_step(&mut p, &grad, lr, cfg.momentum, cfg.weight_decay, &mut velocity);
            local.unflatten(&p)?;
            loss_sum += chunk_loss * inv;
            steps += 1;
        }
    }
    let mean_loss = if steps > 0 {
        loss_sum / steps as f64
    } else {
        // No steps taken: report the current loss over local data.
        let mut total = 0.0;
        for &i in &sorted {
            let trace = forward(&local.extractor, &local.head, ds.features.row(i))?;
            total += trace_loss(&trace, ds.labels[i], cfg.loss);
        }
        if sorted.is_empty() {
            f64::NAN
        } else {
            total / sorted.len() as f64
        }
    };
    Ok(LocalOutcome {
        params: p,
        tau: steps,
        mean_loss,
        head: local.head.weights.clone(),
        n: sorted.len(),
    })
}

/// Server-side optimizer state carried across rounds (used by FedOpt).
#[derive(Clone, Debug, Default)]
pub struct ServerState {
    pub momentum: Vec<f64>,
}

/// Effective step count of a momentum-SGD client normalized as in
/// FedNova: sum_{i=1..tau} (1 - m^i) / (1 - m), with the m = 0 limit tau.
pub fn tau_effective(tau: u64, momentum: f64) -> f64 {
    if momentum == 0.0 {
        return tau as f64;
    }
    let m = momentum;
    let t = tau as f64;
    (t - m * (1.0 - m.powi(tau as i32)) / (1.0 - m)) / (1.0 - m)
}

/// Combine local outcomes into a new global model. Outcomes must be in
/// ascending client-id order; summation follows slice order so results
/// are bit-reproducible.
pub fn aggregate(
    global: &mut ModelParams,
    outcomes: &[&LocalOutcome],
    strategy: &Strategy,
    client_momentum: f64,
    state: &mut ServerState,
) -> Result<()> {
    let g = global.flatten();
    let n_params = g.len();
    let active: Vec<&LocalOutcome> = outcomes.iter().copied().filter(|o| o.n > 0).collect();
    if active.is_empty() {
        return Ok(());
    }
    for o in &active {
        if o.params.len() != n_params {
            return Err(Error::Shape {
                op: "aggregate",
                detail: format!("{} params vs {}", o.params.len(), n_params),
            });
        }
    }
    let total: f64 = active.iter().map(|o| o.n as f64).sum();
    let new = match strategy {
        Strategy::FedAvg | Strategy::FedProx { .. } => {
            let mut acc = vec![0.0; n_params];
            for o in &active {
                let w = o.n as f64 / total;
                for (a, &v) in acc.iter_mut().zip(&o.params) {
                    *a += w * v;
                }
            }
            acc
        }
        Strategy::FedNova => {
            // Zero-step clients contribute no update and drop out of the
            // normalized average.
            let stepped: Vec<&&LocalOutcome> = active.iter().filter(|o| o.tau > 0).collect();
            if stepped.is_empty() {
                return Ok(());
            }
            let t: f64 = stepped.iter().map(|o| o.n as f64).sum();
            let mut dir = vec![0.0; n_params];
            let mut coef = 0.0;
            for o in &stepped {
                let w = o.n as f64 / t;
                let te = tau_effective(o.tau, client_momentum);
                coef += w * te;
                for i in 0..n_params {
                    dir[i] += w * (g[i] - o.params[i]) / te;
                }
            }
            let mut acc = g.clone();
            for i in 0..n_params {
                acc[i] -= coef * dir[i];
            }
            acc
        }
        Strategy::FedOpt {
            server_lr,
            server_momentum,
        } => {
            if state.momentum.len() != n_params {
                state.momentum = vec![0.0; n_params];
            }
            let mut mean = vec![0.0; n_params];
            for o in &active {
                let w = o.n as f64 / total;
                for (a, &v) in mean.iter_mut().zip(&o.params) {
                    *a += w * v;
                }
            }
            let mut acc = g.clone();
            for i in 0..n_params {
                let delta = mean[i] - g[i];
                state.momentum[i] = server_momentum * state.momentum[i] + delta;
                acc[i] += server_lr * state.momentum[i];
            }
            acc
        }
    };
    for (i, v) in new.iter().enumerate() {
        if !v.is_finite() {
            let _ = i;
            return Err(Error::NonFinite("aggregated parameters"));
        }
    }
    global.unflatten(&new)
}

/// Draw ceil(rate * K) distinct client ids for a round, sorted ascending.
pub fn sample_clients(k: usize, rate: f64, seed: u64, round: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let m = ((rate * k as f64).ceil() as usize).clamp(1, k);
    let mut ids: Vec<usize> = (0..k).collect();
    let mut rng = Rng::with_stream(seed, STREAM_SAMPLE).derive(round as u64);
    ids.shuffle(&mut rng);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CalibrationReport {
    pub round: usize,
    pub lambda: f64,
    pub regularized: bool,
    pub accuracy: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub lr: f64,
    /// Participation-weighted mean local training loss.
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// Cross-client classifier disparity after local training, before
    /// aggregation. Absent with a single participant.
    pub alignment: Option<AlignmentStats>,
    /// Classifier-related costs added this round.
    pub cost: CostLedger,
    pub calibration: Option<CalibrationReport>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ModelParams,
    pub reports: Vec<RoundReport>,
    pub ledger: CostLedger,
    pub final_accuracy: f64,
    /// Present when the plan ends with a calibration pass.
    pub calibrated: Option<(CalibratedHead, f64)>,
}

fn calibrate_now(
    model: &ModelParams,
    train: &Dataset,
    partition: &Partition,
    lambda: f64,
    eval: &Dataset,
    ledger: &mut CostLedger,
) -> Result<(CalibratedHead, f64)> {
    let l = model.extractor.feature_dim();
    let c = train.num_classes;
    let mut stats: Vec<CalibStats> = Vec::with_capacity(partition.assignments.len());
    let mut sizes = Vec::with_capacity(partition.assignments.len());
    for idx in &partition.assignments {
        stats.push(client_stats(&model.extractor, train, idx)?);
        sizes.push(idx.len());
        ledger.add_upload((l * (l + c)) as u64 * BYTES_PER_PARAM);
    }
    let flops = cost_ffc_flops(l, c, &sizes);
    ledger.add_client_flops(flops.client_flops);
    ledger.add_server_flops(flops.server_flops);
    let cal = server_solve(&stats, lambda)?;
    let head = cal.clone().into_head(model.head.temperature);
    let acc = crate::metrics::accuracy(&model.extractor, &head, eval)?;
    Ok((cal, acc))
}

/// Full federated run. Deterministic given (config, init, data): client
/// sampling, shuffles, and aggregation order are all derived from the
/// config seed.
pub fn run(
    cfg: &FedConfig,
    init: &ModelParams,
    train: &Dataset,
    partition: &Partition,
    eval: &Dataset,
) -> Result<RunOutcome> {
    cfg.validate()?;
    train.validate()?;
    let k = partition.assignments.len();
    if k == 0 {
        return Err(Error::Parameter("partition has no clients".into()));
    }
    let l = init.extractor.feature_dim();
    let c = init.head.num_classes();
    let head_bytes = (l * c) as u64 * BYTES_PER_PARAM;
    let mut global = init.clone();
    let mut state = ServerState::default();
    let mut ledger = CostLedger::default();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let before = ledger.clone();
        let lr = lr_schedule(&cfg.schedule, round - 1, cfg.rounds, cfg.base_lr);
        let participants = sample_clients(k, cfg.participation, cfg.seed, round);
        let mut outcomes = Vec::with_capacity(participants.len());
        for &id in &participants {
            if !global.head.fixed {
                ledger.add_download(head_bytes);
            }
            let out = local_train(&global, train, &partition.assignments[id], cfg, lr, round, id)
                .map_err(|e| e.in_round(round, id))?;
            if !global.head.fixed {
                ledger.add_upload(head_bytes);
                ledger.add_client_flops(cost_trainable_head_flops(
                    l,
                    c,
                    cfg.local_epochs as u64 * out.n as u64,
                ));
            }
            outcomes.push(out);
        }
        let total_n: f64 = outcomes.iter().map(|o| o.n as f64).sum();
        let train_loss = if total_n > 0.0 {
            outcomes
                .iter()
                .map(|o| o.n as f64 / total_n * o.mean_loss)
                .sum()
        } else {
            f64::NAN
        };
        let alignment = if outcomes.len() >= 2 {
            let heads: Vec<&Matrix> = outcomes.iter().map(|o| &o.head).collect();
            Some(classifier_alignment(&heads)?)
        } else {
            None
        };
        let refs: Vec<&LocalOutcome> = outcomes.iter().collect();
        aggregate(&mut global, &refs, &cfg.strategy, cfg.momentum, &mut state)?;
        let eval_accuracy = crate::metrics::accuracy(&global.extractor, &global.head, eval)?;
        let calibration = match cfg.calibration {
            CalibrationPlan::Every { interval }
                if round % interval == 0 && round != cfg.rounds =>
            {
                let (cal, acc) =
                    calibrate_now(&global, train, partition, cfg.lambda, eval, &mut ledger)?;
                // Multi-time calibration: training continues with the
                // re-fitted classifier; only the weights change.
                global.head.weights = cal.weights.clone();
                Some(CalibrationReport {
                    round,
                    lambda: cfg.lambda,
                    regularized: cal.regularized,
                    accuracy: acc,
                })
            }
            _ => None,
        };
        reports.push(RoundReport {
            round,
            participants,
            lr,
            train_loss,
            eval_accuracy,
            alignment,
            cost: ledger.delta_since(&before),
            calibration,
        });
    }
    let final_accuracy = crate::metrics::accuracy(&global.extractor, &global.head, eval)?;
    let calibrated = match cfg.calibration {
        CalibrationPlan::Off => None,
        CalibrationPlan::Final | CalibrationPlan::Every { .. } => {
            let (cal, acc) =
                calibrate_now(&global, train, partition, cfg.lambda, eval, &mut ledger)?;
            Some((cal, acc))
        }
    };
    Ok(RunOutcome {
        model: global,
        reports,
        ledger,
        final_accuracy,
        calibrated,
    })
}
