//! The round loop: local client training, UFM reporting and the three
//! server aggregators (FedAvg, FedAvg with differential privacy, RESFL).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{local_train_step, CompositeLossTerms, StepConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evidential::evidence_from_logits;
use crate::fairness::{self, FairnessSignal, GroupUncertainty};
use crate::metrics::{self, GroupConfusion};
use crate::nn::{self, Layout, NetworkSpec, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Fedavg,
    FedavgDp,
    Resfl,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Fedavg, Aggregator::FedavgDp, Aggregator::Resfl];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Fedavg => "fedavg",
            Aggregator::FedavgDp => "fedavg_dp",
            Aggregator::Resfl => "resfl",
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregator `{s}`")))
    }
}

pub const DEFAULT_DP_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub epsilon: f64,
    pub clip: f64,
    #[serde(default = "default_dp_delta")]
    pub delta: f64,
}

fn default_dp_delta() -> f64 {
    DEFAULT_DP_DELTA
}

impl DpConfig {
    /// Gaussian-mechanism multiplier `sqrt(2 ln(1.25 / delta)) / epsilon`.
    pub fn noise_multiplier(&self) -> f64 {
        (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.clip > 0.0) {
            return Err(Error::Config("dp.epsilon and dp.clip must be > 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("dp.delta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Which model a malicious client evaluates when reporting its UFM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UfmSource {
    /// The perturbed model it actually submits.
    #[default]
    Submitted,
    /// Its honest local model.
    Honest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineConfig {
    pub malicious_fraction: f64,
    /// Per-coordinate standard deviation as a multiple of the running mean
    /// update norm.
    #[serde(default = "default_norm_multiple")]
    pub norm_multiple: f64,
    /// Absolute per-coordinate standard deviation; overrides `norm_multiple`.
    #[serde(default)]
    pub perturb_std: Option<f64>,
    #[serde(default)]
    pub ufm_source: UfmSource,
}

fn default_norm_multiple() -> f64 {
    10.0
}

impl ByzantineConfig {
    pub fn malicious_count(&self, num_clients: usize) -> usize {
        ((self.malicious_fraction * num_clients as f64).ceil() as usize).min(num_clients)
    }

    /// True when the configuration can never change an update.
    pub fn is_inert(&self) -> bool {
        self.malicious_fraction == 0.0 || self.norm_multiple == 0.0 && self.perturb_std.is_none()
            || self.perturb_std == Some(0.0)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.malicious_fraction) {
            return Err(Error::Config("byzantine.malicious_fraction must lie in [0, 1)".into()));
        }
        if !(self.norm_multiple >= 0.0) || self.perturb_std.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::Config("byzantine perturbation scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    /// Minibatch steps per client per round.
    pub local_iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adversary_lr: f64,
    pub lambda_uncertainty: f64,
    pub lambda_adv: f64,
    pub aggregator: Aggregator,
    pub dp: Option<DpConfig>,
    /// Server step for RESFL; `None` means `1 / num_clients`.
    pub server_lr: Option<f64>,
    pub seed: u64,
    pub ufm_epsilon: f64,
    /// Fraction of each shard held out from training and used for UFM; 0
    /// computes UFM on the training shard.
    pub ufm_holdout: f64,
    pub favourable_classes: Vec<usize>,
    pub byzantine: Option<ByzantineConfig>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            rounds: 100,
            local_iterations: 10,
            batch_size: 64,
            lr: 0.001,
            adversary_lr: 0.001,
            lambda_uncertainty: 0.1,
            lambda_adv: 0.01,
            aggregator: Aggregator::Resfl,
            dp: None,
            server_lr: None,
            seed: 1,
            ufm_epsilon: fairness::DEFAULT_UFM_EPSILON,
            ufm_holdout: 0.0,
            favourable_classes: vec![1],
            byzantine: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        // zero rounds is allowed and yields the initial model
        if self.num_clients == 0 || self.local_iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "num_clients, local_iterations and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.adversary_lr > 0.0) {
            return Err(Error::Config("lr and adversary_lr must be > 0".into()));
        }
        if !(self.lambda_uncertainty >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::Config("lambda_uncertainty and lambda_adv must be >= 0".into()));
        }
        if self.server_lr.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("server_lr must be > 0".into()));
        }
        if !(self.ufm_epsilon > 0.0) {
            return Err(Error::Config("ufm_epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ufm_holdout) {
            return Err(Error::Config("ufm_holdout must lie in [0, 1)".into()));
        }
        if self.favourable_classes.is_empty() || self.favourable_classes.iter().any(|&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "favourable_classes must be a non-empty subset of 0..{num_classes}"
            )));
        }
        match (self.aggregator, &self.dp) {
            (Aggregator::FedavgDp, None) => {
                return Err(Error::Config("aggregator fedavg_dp requires a [dp] section".into()))
            }
            (Aggregator::FedavgDp, Some(dp)) => dp.validate()?,
            (_, Some(_)) => {
                return Err(Error::Config(format!(
                    "[dp] settings are only valid with aggregator fedavg_dp, not {}",
                    self.aggregator
                )))
            }
            _ => {}
        }
        if let Some(b) = &self.byzantine {
            b.validate()?;
        }
        Ok(())
    }

    pub fn effective_server_lr(&self) -> f64 {
        self.server_lr.unwrap_or(1.0 / self.num_clients as f64)
    }

    /// Loss coefficients used by clients. The baselines train on the task
    /// loss alone.
    pub fn loss_lambdas(&self) -> (f64, f64) {
        match self.aggregator {
            Aggregator::Resfl => (self.lambda_uncertainty, self.lambda_adv),
            Aggregator::Fedavg | Aggregator::FedavgDp => (0.0, 0.0),
        }
    }

    /// Local step settings with the aggregator-specific loss weights.
    pub fn step_config(&self) -> StepConfig {
        let (lambda_uncertainty, lambda_adv) = self.loss_lambdas();
        StepConfig {
            lr: self.lr,
            adversary_lr: self.adversary_lr,
            lambda_uncertainty,
            lambda_adv,
        }
    }
}

/// SplitMix64 finaliser folded over `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_INIT: u64 = 0x1A17;
const STREAM_CLIENT: u64 = 0xC11E;
const STREAM_DP: u64 = 0xD1FF;
const STREAM_BYZANTINE: u64 = 0xB42;

pub fn client_rng(seed: u64, client_id: usize, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_CLIENT, client_id as u64, round as u64]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `theta_local - theta_global`; adversary parameters never leave the client.
    pub delta: Vec<f64>,
    pub ufm: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub update: ClientUpdate,
    /// The client's adversary parameters after training.
    pub phi: Vec<f64>,
    /// Loss terms averaged over the local iterations.
    pub loss: CompositeLossTerms,
}

/// Splits a shard into the training part and the part used for UFM.
fn split_for_ufm(shard: &[Sample], holdout: f64) -> (&[Sample], &[Sample]) {
    if holdout <= 0.0 || shard.len() < 2 {
        return (shard, shard);
    }
    let held = ((holdout * shard.len() as f64).round() as usize).clamp(1, shard.len() - 1);
    let (train, test) = shard.split_at(shard.len() - held);
    (train, test)
}

/// UFM of `params` on `samples` using per-sample total evidence.
pub fn shard_ufm(params: &ParameterSet, samples: &[Sample], epsilon: f64) -> Result<FairnessSignal> {
    let groups = group_uncertainty_for(params, samples)?;
    FairnessSignal::from_groups(&groups, epsilon)
}

fn group_uncertainty_for(params: &ParameterSet, samples: &[Sample]) -> Result<Vec<GroupUncertainty>> {
    let num_groups = params.layout().spec().num_groups;
    let per_sample = samples
        .iter()
        .map(|s| Ok((evidence_from_logits(&nn::forward(params, &s.x)?.z_task).total_evidence, s.s)))
        .collect::<Result<Vec<_>>>()?;
    fairness::group_uncertainties(&per_sample, num_groups)
}

/// One round of local training starting from `global` with the client's own
/// adversary parameters `phi`.
pub fn client_round(
    client_id: usize,
    global: &ParameterSet,
    phi: &[f64],
    shard: &[Sample],
    config: &FederationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClientOutcome> {
    if shard.is_empty() {
        return Err(Error::Empty(format!("shard of client {client_id}")));
    }
    let (train, ufm_set) = split_for_ufm(shard, config.ufm_holdout);
    let step = config.step_config();
    let mut params = global.clone();
    params.phi_mut().copy_from_slice(phi);

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let batch_len = config.batch_size.min(train.len());
    let mut sums = [0.0; 3];
    let mut batch = Vec::with_capacity(batch_len);
    for _ in 0..config.local_iterations {
        batch.clear();
        while batch.len() < batch_len {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let (next, terms) = local_train_step(&params, &batch, &step)?;
        params = next;
        sums[0] += terms.task;
        sums[1] += terms.uncertainty;
        sums[2] += terms.adversary;
    }
    let iters = config.local_iterations.max(1) as f64;
    let loss = CompositeLossTerms::new(
        sums[0] / iters,
        sums[1] / iters,
        sums[2] / iters,
        step.lambda_uncertainty,
        step.lambda_adv,
    );
    let signal = shard_ufm(&params, ufm_set, config.ufm_epsilon)?;
    let delta: Vec<f64> = params.theta().iter().zip(global.theta()).map(|(l, g)| l - g).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("update of client {client_id}")));
    }
    Ok(ClientOutcome {
        update: ClientUpdate {
            client_id,
            delta,
            ufm: signal.ufm,
            sample_count: train.len(),
        },
        phi: params.phi().to_vec(),
        loss,
    })
}

fn weighted_sum(updates: &[ClientUpdate], weights: &[f64]) -> Result<Vec<f64>> {
    let dim = updates[0].delta.len();
    if updates.iter().any(|u| u.delta.len() != dim) {
        return Err(Error::Shape("client updates differ in length".into()));
    }
    let mut out = vec![0.0; dim];
    for (u, &w) in updates.iter().zip(weights) {
        for (o, d) in out.iter_mut().zip(&u.delta) {
            *o += w * d;
        }
    }
    Ok(out)
}

pub fn fedavg_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    updates
        .iter()
        .map(|u| u.sample_count as f64 / total as f64)
        .collect()
}

/// Effective per-client weights `server_lr / (1 + ufm)`.
pub fn resfl_weights(updates: &[ClientUpdate], server_lr: f64) -> Result<Vec<f64>> {
    updates
        .iter()
        .map(|u| Ok(server_lr * fairness::aggregation_weight(u.ufm)?))
        .collect()
}

/// Sample-count weighted mean of the deltas.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Empty("no client updates to aggregate".into()));
    }
    weighted_sum(updates, &fedavg_weights(updates))
}

/// `theta_g + server_lr * sum_i delta_i / (1 + ufm_i)`, without normalising
/// the weights.
pub fn aggregate_resfl(theta_g: &[f64], updates: &[ClientUpdate], server_lr: f64) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Empty("no client updates to aggregate".into()));
    }
    if !(server_lr > 0.0) {
        return Err(Error::Domain("server_lr must be > 0".into()));
    }
    let step = weighted_sum(updates, &resfl_weights(updates, server_lr)?)?;
    if step.len() != theta_g.len() {
        return Err(Error::Shape("update length differs from the global model".into()));
    }
    Ok(theta_g.iter().zip(&step).map(|(t, s)| t + s).collect())
}

/// Clips the delta to norm `clip` and adds `N(0, (noise_multiplier * clip)^2)`
/// to every coordinate.
pub fn apply_dp(update: &ClientUpdate, clip: f64, noise_multiplier: f64, rng: &mut ChaCha8Rng) -> Result<ClientUpdate> {
    if !(clip > 0.0) || !(noise_multiplier >= 0.0) {
        return Err(Error::Domain("dp needs clip > 0 and noise multiplier >= 0".into()));
    }
    let norm = l2_norm(&update.delta);
    let factor = if norm > clip { clip / norm } else { 1.0 };
    let std = noise_multiplier * clip;
    let noise = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
    let delta = update
        .delta
        .iter()
        .map(|d| d * factor + if std > 0.0 { noise.sample(rng) } else { 0.0 })
        .collect();
    Ok(ClientUpdate { delta, ..update.clone() })
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Global-model quality on a labelled evaluation set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub group_accuracy: Vec<f64>,
    pub confusion: GroupConfusion,
    pub di_dev: f64,
    pub delta_eop: f64,
    pub eod: f64,
    pub group_uncertainty: Vec<GroupUncertainty>,
    pub uncertainty_mean: f64,
    pub uncertainty_variance: f64,
}

pub fn predict(params: &ParameterSet, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| Ok(evidence_from_logits(&nn::forward(params, &s.x)?.z_task).predicted_class()))
        .collect()
}

pub fn accuracy(params: &ParameterSet, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let preds = predict(params, samples)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.y).count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Latent features `h` for every sample.
pub fn latents(params: &ParameterSet, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| Ok(nn::forward(params, &s.x)?.h)).collect()
}

pub fn evaluate(params: &ParameterSet, eval_set: &[Sample], favourable: &[usize]) -> Result<Evaluation> {
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let num_groups = params.layout().spec().num_groups;
    let mut preds = Vec::with_capacity(eval_set.len());
    let mut per_sample = Vec::with_capacity(eval_set.len());
    for s in eval_set {
        let out = evidence_from_logits(&nn::forward(params, &s.x)?.z_task);
        preds.push(out.predicted_class());
        per_sample.push((out.total_evidence, s.s));
    }
    let mut correct = vec![0usize; num_groups];
    let mut count = vec![0usize; num_groups];
    for (p, s) in preds.iter().zip(eval_set) {
        count[s.s] += 1;
        correct[s.s] += usize::from(*p == s.y);
    }
    let group_accuracy = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let confusion = metrics::confusion_by_group(&preds, eval_set, num_groups, favourable)?;
    let group_uncertainty = fairness::group_uncertainties(&per_sample, num_groups)?;
    let us: Vec<f64> = group_uncertainty.iter().map(|g| g.uncertainty).collect();
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / eval_set.len() as f64,
        group_accuracy,
        di_dev: metrics::di_deviation(&confusion).value,
        delta_eop: metrics::delta_eop(&confusion).value,
        eod: metrics::eod(&confusion).value,
        confusion,
        uncertainty_mean: us.iter().sum::<f64>() / us.len() as f64,
        uncertainty_variance: fairness::uncertainty_variance(&us)?,
        group_uncertainty,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedClient {
    pub client_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    pub group_accuracy: Vec<f64>,
    pub di_dev: f64,
    pub delta_eop: f64,
    pub eod: f64,
    /// Reported UFM per client id; `None` for dropped clients.
    pub client_ufm: Vec<Option<f64>>,
    /// `1 / (1 + ufm)` per client id.
    pub client_weight: Vec<Option<f64>>,
    pub ufm_mean: f64,
    /// Mean L2 norm of the honest `delta_theta` of clients that finished
    /// local training, before any perturbation or privacy noise.
    pub update_norm: f64,
    pub uncertainty_mean: f64,
    pub uncertainty_variance: f64,
    /// Mean over received clients of their mean local loss terms.
    pub loss_task: f64,
    pub loss_uncertainty: f64,
    pub loss_adversary: f64,
    pub dropped: Vec<DroppedClient>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub final_params: ParameterSet,
    pub records: Vec<RoundRecord>,
    pub client_phi: Vec<Vec<f64>>,
}

pub fn initial_params(network: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    let layout = Layout::new(network.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_INIT]));
    Ok(ParameterSet::init(layout, &mut rng))
}

/// Runs `config.rounds` rounds over `shards` (one per client), evaluating the
/// global model on `eval_set` after each round.
pub fn run_experiment(
    config: &FederationConfig,
    network: &NetworkSpec,
    shards: &[Vec<Sample>],
    eval_set: &[Sample],
) -> Result<ExperimentOutcome> {
    config.validate(network.num_classes)?;
    if shards.len() != config.num_clients {
        return Err(Error::Config(format!(
            "{} shards for {} clients",
            shards.len(),
            config.num_clients
        )));
    }
    let mut global = initial_params(network, config.seed)?;
    let mut client_phi = vec![global.phi().to_vec(); config.num_clients];
    let mut byzantine = ByzantineState::new(config);
    let mut records = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let results: Vec<Result<ClientOutcome>> = (0..config.num_clients)
            .into_par_iter()
            .map(|id| {
                let mut rng = client_rng(config.seed, id, round);
                client_round(id, &global, &client_phi[id], &shards[id], config, &mut rng)
            })
            .collect();

        let mut outcomes = Vec::new();
        let mut dropped = Vec::new();
        for (id, r) in results.into_iter().enumerate() {
            match r {
                Ok(o) => outcomes.push(o),
                Err(e) => dropped.push(DroppedClient {
                    client_id: id,
                    reason: e.to_string(),
                }),
            }
        }
        for o in &outcomes {
            client_phi[o.update.client_id].clone_from(&o.phi);
        }
        let update_norm = if outcomes.is_empty() {
            0.0
        } else {
            outcomes.iter().map(|o| l2_norm(&o.update.delta)).sum::<f64>() / outcomes.len() as f64
        };
        let mut updates: Vec<ClientUpdate> = outcomes.iter().map(|o| o.update.clone()).collect();
        if let Some(state) = byzantine.as_mut() {
            updates = state.perturb(updates, &global, shards, config, round, &mut dropped)?;
        }
        if updates.is_empty() {
            return Err(Error::Diverged(format!("every client failed in round {round}")));
        }

        let theta_next = match config.aggregator {
            Aggregator::Fedavg => add(global.theta(), &aggregate_fedavg(&updates)?),
            Aggregator::FedavgDp => {
                let dp = config.dp.as_ref().expect("validated");
                let sigma = dp.noise_multiplier();
                let noisy = updates
                    .iter()
                    .map(|u| {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                            config.seed,
                            STREAM_DP,
                            u.client_id as u64,
                            round as u64,
                        ]));
                        apply_dp(u, dp.clip, sigma, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                add(global.theta(), &aggregate_fedavg(&noisy)?)
            }
            Aggregator::Resfl => aggregate_resfl(global.theta(), &updates, config.effective_server_lr())?,
        };
        global.theta_mut().copy_from_slice(&theta_next);

        let eval = evaluate(&global, eval_set, &config.favourable_classes)?;
        let mut client_ufm = vec![None; config.num_clients];
        let mut client_weight = vec![None; config.num_clients];
        for u in &updates {
            client_ufm[u.client_id] = Some(u.ufm);
            client_weight[u.client_id] = Some(1.0 / (1.0 + u.ufm));
        }
        let received: Vec<&ClientOutcome> = outcomes
            .iter()
            .filter(|o| updates.iter().any(|u| u.client_id == o.update.client_id))
            .collect();
        let n = received.len() as f64;
        dropped.sort_by_key(|d| d.client_id);
        records.push(RoundRecord {
            round,
            accuracy: eval.accuracy,
            group_accuracy: eval.group_accuracy,
            di_dev: eval.di_dev,
            delta_eop: eval.delta_eop,
            eod: eval.eod,
            ufm_mean: updates.iter().map(|u| u.ufm).sum::<f64>() / updates.len() as f64,
            client_ufm,
            client_weight,
            update_norm,
            uncertainty_mean: eval.uncertainty_mean,
            uncertainty_variance: eval.uncertainty_variance,
            loss_task: received.iter().map(|o| o.loss.task).sum::<f64>() / n,
            loss_uncertainty: received.iter().map(|o| o.loss.uncertainty).sum::<f64>() / n,
            loss_adversary: received.iter().map(|o| o.loss.adversary).sum::<f64>() / n,
            dropped,
        });
    }
    Ok(ExperimentOutcome {
        final_params: global,
        records,
        client_phi,
    })
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Server-side simulation of malicious clients: the first
/// `ceil(f * K)` clients add Gaussian noise to their updates.
struct ByzantineState {
    config: ByzantineConfig,
    malicious: usize,
    norm_sum: f64,
    norm_count: usize,
}

impl ByzantineState {
    fn new(fed: &FederationConfig) -> Option<Self> {
        let config = fed.byzantine?;
        if config.is_inert() {
            return None;
        }
        Some(Self {
            malicious: config.malicious_count(fed.num_clients),
            config,
            norm_sum: 0.0,
            norm_count: 0,
        })
    }

    fn perturb(
        &mut self,
        mut updates: Vec<ClientUpdate>,
        global: &ParameterSet,
        shards: &[Vec<Sample>],
        fed: &FederationConfig,
        round: usize,
        dropped: &mut Vec<DroppedClient>,
    ) -> Result<Vec<ClientUpdate>> {
        for u in &updates {
            self.norm_sum += l2_norm(&u.delta);
            self.norm_count += 1;
        }
        let std = match self.config.perturb_std {
            Some(s) => s,
            None if self.norm_count == 0 => return Ok(updates),
            None => self.config.norm_multiple * (self.norm_sum / self.norm_count as f64),
        };
        let noise = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
        let mut keep = Vec::with_capacity(updates.len());
        for mut u in updates.drain(..) {
            if u.client_id < self.malicious {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    fed.seed,
                    STREAM_BYZANTINE,
                    u.client_id as u64,
                    round as u64,
                ]));
                u.delta.iter_mut().for_each(|d| *d += noise.sample(&mut rng));
                if self.config.ufm_source == UfmSource::Submitted {
                    let mut submitted = global.clone();
                    submitted
                        .theta_mut()
                        .iter_mut()
                        .zip(&u.delta)
                        .for_each(|(t, d)| *t += d);
                    let (_, ufm_set) = split_for_ufm(&shards[u.client_id], fed.ufm_holdout);
                    match shard_ufm(&submitted, ufm_set, fed.ufm_epsilon) {
                        Ok(signal) => u.ufm = signal.ufm,
                        Err(e) => {
                            dropped.push(DroppedClient {
                                client_id: u.client_id,
                                reason: e.to_string(),
                            });
                            continue;
                        }
                    }
                }
            }
            keep.push(u);
        }
        Ok(keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, partition, SynthSpec};

    fn update(id: usize, delta: Vec<f64>, ufm: f64, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            delta,
            ufm,
            sample_count: n,
        }
    }

    fn small_setup(k: usize) -> (NetworkSpec, Vec<Vec<Sample>>, Vec<Sample>) {
        let spec = SynthSpec {
            input_dim: 6,
            samples_per_group: vec![60, 40, 30, 20],
            ..SynthSpec::default()
        };
        let data = generate_dataset(&spec, 3).unwrap();
        let test = generate_dataset(&spec, 4).unwrap();
        let shards = partition(&data, k, 0.5, 5).unwrap();
        let network = NetworkSpec {
            input_dim: 6,
            hidden_dims: vec![8],
            num_classes: 2,
            num_groups: 4,
            activation: Default::default(),
        };
        (network, shards, test)
    }

    fn small_config(k: usize, aggregator: Aggregator) -> FederationConfig {
        FederationConfig {
            num_clients: k,
            rounds: 3,
            local_iterations: 4,
            batch_size: 16,
            lr: 0.05,
            adversary_lr: 0.05,
            aggregator,
            dp: (aggregator == Aggregator::FedavgDp).then_some(DpConfig {
                epsilon: 0.5,
                clip: 1.0,
                delta: DEFAULT_DP_DELTA,
            }),
            ..FederationConfig::default()
        }
    }

    #[test]
    fn fedavg_examples() {
        let one = aggregate_fedavg(&[update(0, vec![1.5, -2.0], 0.0, 7)]).unwrap();
        assert_eq!(one, vec![1.5, -2.0]);
        let sym = aggregate_fedavg(&[update(0, vec![3.0], 0.0, 5), update(1, vec![-3.0], 0.0, 5)]).unwrap();
        assert_eq!(sym, vec![0.0]);
        let w = aggregate_fedavg(&[update(0, vec![4.0], 0.0, 1), update(1, vec![0.0], 0.0, 3)]).unwrap();
        assert_eq!(w, vec![1.0]);
        assert!(aggregate_fedavg(&[]).is_err());
    }

    #[test]
    fn resfl_examples() {
        let out = aggregate_resfl(&[0.0], &[update(0, vec![1.0], 0.0, 1), update(1, vec![1.0], 1.0, 1)], 1.0).unwrap();
        assert_eq!(out, vec![1.5]);
        let vanishing =
            aggregate_resfl(&[0.0], &[update(0, vec![1.0], 0.0, 1), update(1, vec![5.0], 1e15, 1)], 1.0).unwrap();
        assert!((vanishing[0] - 1.0).abs() < 1e-12);
        assert!(aggregate_resfl(&[0.0], &[], 1.0).is_err());
    }

    #[test]
    fn resfl_matches_fedavg_without_disparity() {
        let theta = vec![0.3, -1.1, 2.5];
        let ups: Vec<ClientUpdate> = (0..3)
            .map(|i| update(i, vec![0.1 * i as f64, -0.7 / (i + 1) as f64, 1.0 / 3.0], 0.0, 50))
            .collect();
        let resfl = aggregate_resfl(&theta, &ups, 1.0 / 3.0).unwrap();
        let fedavg = add(&theta, &aggregate_fedavg(&ups).unwrap());
        assert_eq!(resfl, fedavg);
    }

    #[test]
    fn resfl_weights_bounded_and_linear() {
        let ups: Vec<ClientUpdate> = (0..4)
            .map(|i| update(i, vec![i as f64 + 1.0, -1.0], i as f64 * 0.7, 10))
            .collect();
        let w = resfl_weights(&ups, 1.0).unwrap();
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!(w.iter().sum::<f64>() <= 4.0);
        let full = aggregate_resfl(&[0.0, 0.0], &ups, 1.0).unwrap();
        let without = aggregate_resfl(&[0.0, 0.0], &ups[..3], 1.0).unwrap();
        for j in 0..2 {
            let term = w[3] * ups[3].delta[j];
            assert!((full[j] - without[j] - term).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = update(0, vec![0.3, 0.4], 0.0, 1);
        assert_eq!(apply_dp(&u, 1.0, 0.0, &mut rng).unwrap().delta, u.delta);
        let big = update(0, vec![6.0, 8.0], 0.0, 1);
        let clipped = apply_dp(&big, 5.0, 0.0, &mut rng).unwrap();
        assert!((clipped.delta[0] - 3.0).abs() < 1e-12 && (clipped.delta[1] - 4.0).abs() < 1e-12);
        assert!(apply_dp(&u, 0.0, 1.0, &mut rng).is_err());
    }

    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn dp_noise_matches_direct_sampling() {
        let u = update(0, vec![0.5, -0.2, 0.1, 0.3, 0.0], 0.0, 1);
        let (clip, sigma) = (1.0, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ours: Vec<f64> = (0..1000)
            .map(|_| l2_norm(&apply_dp(&u, clip, sigma, &mut rng).unwrap().delta))
            .collect();
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, sigma * clip).unwrap();
        let direct: Vec<f64> = (0..1000)
            .map(|_| {
                let v: Vec<f64> = u.delta.iter().map(|d| d + normal.sample(&mut oracle_rng)).collect();
                l2_norm(&v)
            })
            .collect();
        // two-sample KS critical value at alpha = 0.001 is about 0.087
        assert!(ks_statistic(ours, direct) < 0.087);
    }

    #[test]
    fn dp_multiplier() {
        let dp = DpConfig {
            epsilon: 0.5,
            clip: 1.0,
            delta: 1e-5,
        };
        assert!((dp.noise_multiplier() - (2.0f64 * 125000.0f64.ln()).sqrt() / 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_give_zero_delta() {
        let (network, shards, _) = small_setup(2);
        let mut cfg = small_config(2, Aggregator::Resfl);
        cfg.local_iterations = 0;
        let g = initial_params(&network, 1).unwrap();
        let out = client_round(0, &g, g.phi(), &shards[0], &cfg, &mut client_rng(1, 0, 0)).unwrap();
        assert!(out.update.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn identical_clients_identical_updates() {
        let (network, shards, _) = small_setup(2);
        let cfg = small_config(2, Aggregator::Resfl);
        let g = initial_params(&network, 1).unwrap();
        let a = client_round(0, &g, g.phi(), &shards[0], &cfg, &mut client_rng(9, 0, 0)).unwrap();
        let b = client_round(1, &g, g.phi(), &shards[0], &cfg, &mut client_rng(9, 0, 0)).unwrap();
        assert_eq!(a.update.delta, b.update.delta);
        assert_eq!(a.update.ufm, b.update.ufm);
    }

    #[test]
    fn one_iteration_replays_a_single_step() {
        let (network, shards, _) = small_setup(2);
        let mut cfg = small_config(2, Aggregator::Resfl);
        cfg.local_iterations = 1;
        cfg.batch_size = shards[0].len();
        let g = initial_params(&network, 2).unwrap();
        let out = client_round(0, &g, g.phi(), &shards[0], &cfg, &mut client_rng(1, 0, 0)).unwrap();
        let (next, _) = local_train_step(&g, &shards[0], &cfg.step_config()).unwrap();
        for ((d, n), o) in out.update.delta.iter().zip(next.theta()).zip(g.theta()) {
            assert!((d - (n - o)).abs() < 1e-12);
        }
        assert_eq!(out.phi.len(), next.phi().len());
        for (a, b) in out.phi.iter().zip(next.phi()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rounds_return_initial_params() {
        let (network, shards, test) = small_setup(2);
        let mut cfg = small_config(2, Aggregator::Fedavg);
        cfg.rounds = 0;
        let out = run_experiment(&cfg, &network, &shards, &test).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_params.values(), initial_params(&network, cfg.seed).unwrap().values());
    }

    #[test]
    fn experiments_are_deterministic() {
        let (network, shards, test) = small_setup(3);
        for agg in Aggregator::ALL {
            let cfg = small_config(3, agg);
            let a = run_experiment(&cfg, &network, &shards, &test).unwrap();
            let b = run_experiment(&cfg, &network, &shards, &test).unwrap();
            assert_eq!(a.records, b.records);
            assert_eq!(a.final_params.values(), b.final_params.values());
            assert_eq!(a.records.len(), 3);
            for r in &a.records {
                for (u, w) in r.client_ufm.iter().zip(&r.client_weight) {
                    assert_eq!(w.unwrap(), 1.0 / (1.0 + u.unwrap()));
                }
            }
        }
    }

    #[test]
    fn single_client_fedavg_is_centralised_sgd() {
        let (network, shards, test) = small_setup(1);
        let mut cfg = small_config(1, Aggregator::Fedavg);
        cfg.batch_size = shards[0].len();
        let out = run_experiment(&cfg, &network, &shards, &test).unwrap();

        let mut params = initial_params(&network, cfg.seed).unwrap();
        let step = StepConfig {
            lr: cfg.lr,
            adversary_lr: cfg.adversary_lr,
            lambda_uncertainty: 0.0,
            lambda_adv: 0.0,
        };
        for _ in 0..cfg.rounds * cfg.local_iterations {
            params = local_train_step(&params, &shards[0], &step).unwrap().0;
        }
        for (a, b) in out.final_params.theta().iter().zip(params.theta()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn inert_byzantine_changes_nothing() {
        let (network, shards, test) = small_setup(4);
        let clean = run_experiment(&small_config(4, Aggregator::Resfl), &network, &shards, &test).unwrap();
        for byz in [
            ByzantineConfig {
                malicious_fraction: 0.0,
                norm_multiple: 10.0,
                perturb_std: None,
                ufm_source: UfmSource::Submitted,
            },
            ByzantineConfig {
                malicious_fraction: 0.25,
                norm_multiple: 0.0,
                perturb_std: None,
                ufm_source: UfmSource::Submitted,
            },
        ] {
            let mut cfg = small_config(4, Aggregator::Resfl);
            cfg.byzantine = Some(byz);
            let out = run_experiment(&cfg, &network, &shards, &test).unwrap();
            assert_eq!(out.records, clean.records);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FederationConfig {
            aggregator: Aggregator::FedavgDp,
            ..FederationConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        cfg.dp = Some(DpConfig {
            epsilon: 0.1,
            clip: 1.0,
            delta: DEFAULT_DP_DELTA,
        });
        cfg.validate(2).unwrap();
        cfg.aggregator = Aggregator::Fedavg;
        assert!(cfg.validate(2).is_err());
        assert_eq!(FederationConfig::default().effective_server_lr(), 0.25);
        assert_eq!("fedavg_dp".parse::<Aggregator>().unwrap(), Aggregator::FedavgDp);
        assert!("fedprox".parse::<Aggregator>().is_err());
    }

    #[test]
    fn holdout_split_keeps_both_parts() {
        let shard: Vec<Sample> = (0..10).map(|i| Sample { x: vec![i as f64], y: 0, s: 0 }).collect();
        let (train, test) = split_for_ufm(&shard, 0.2);
        assert_eq!((train.len(), test.len()), (8, 2));
        let (train, test) = split_for_ufm(&shard, 0.0);
        assert_eq!((train.len(), test.len()), (10, 10));
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(&[1, 0, 0]), mix_seed(&[1, 0, 1]));
        assert_ne!(mix_seed(&[1, 1, 0]), mix_seed(&[1, 0, 1]));
        assert_eq!(mix_seed(&[5, 6]), mix_seed(&[5, 6]));
    }
}
