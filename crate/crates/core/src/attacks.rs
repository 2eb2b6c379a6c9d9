//! Measurement harnesses for membership inference, attribute inference,
//! Byzantine update perturbation and fairness-targeted poisoning.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{local_train_step, StepConfig};
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::evidential::evidence_from_logits;
use crate::federation::{self, mix_seed, ByzantineConfig, FederationConfig};
use crate::nn::{self, NetworkSpec, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Mia,
    Aia,
    Byzantine,
    Poisoning,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Mia, AttackKind::Aia, AttackKind::Byzantine, AttackKind::Poisoning];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Mia => "mia",
            AttackKind::Aia => "aia",
            AttackKind::Byzantine => "byzantine",
            AttackKind::Poisoning => "poisoning",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack `{s}` (expected mia, aia, byzantine or poisoning)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub score: f64,
    pub auxiliary: BTreeMap<String, f64>,
}

impl AttackReport {
    pub(crate) fn new(kind: AttackKind, score: f64, aux: impl IntoIterator<Item = (&'static str, f64)>) -> Self {
        Self {
            kind,
            score,
            auxiliary: aux.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

/// Anything that exposes a per-input confidence score.
pub trait ConfidenceModel {
    fn confidence(&self, x: &[f64]) -> Result<f64>;
}

impl ConfidenceModel for ParameterSet {
    /// Largest entry of the Dirichlet mean.
    fn confidence(&self, x: &[f64]) -> Result<f64> {
        Ok(evidence_from_logits(&nn::forward(self, x)?.z_task).confidence())
    }
}

/// Threshold `tau` maximising balanced accuracy of `c >= tau => member`.
/// Returns `(tau, balanced_accuracy)`.
pub fn fit_threshold(member: &[f64], nonmember: &[f64]) -> Result<(f64, f64)> {
    if member.is_empty() || nonmember.is_empty() {
        return Err(Error::Empty("threshold fitting needs both members and non-members".into()));
    }
    let mut candidates: Vec<f64> = member.iter().chain(nonmember).copied().collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for &tau in &candidates {
        let tpr = member.iter().filter(|&&c| c >= tau).count() as f64 / member.len() as f64;
        let tnr = nonmember.iter().filter(|&&c| c < tau).count() as f64 / nonmember.len() as f64;
        let bal = 0.5 * (tpr + tnr);
        if bal > best.1 {
            best = (tau, bal);
        }
    }
    Ok(best)
}

fn confidences<M: ConfidenceModel + ?Sized>(model: &M, pool: &[Sample]) -> Result<Vec<f64>> {
    pool.iter().map(|s| model.confidence(&s.x)).collect()
}

fn fingerprint(s: &Sample) -> Vec<u64> {
    s.x.iter().map(|v| v.to_bits()).collect()
}

fn check_disjoint(pools: &[(&str, &[Sample])]) -> Result<()> {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for (name, pool) in pools {
        if pool.is_empty() {
            return Err(Error::Empty(format!("{name} pool")));
        }
        let mine: HashSet<Vec<u64>> = pool.iter().map(fingerprint).collect();
        if !seen.is_disjoint(&mine) {
            return Err(Error::Domain(format!("{name} pool overlaps another pool")));
        }
        seen.extend(mine);
    }
    Ok(())
}

/// How the adversary trains its shadow model: it mimics the target's
/// federated recipe on IID shards of its own data.
#[derive(Debug, Clone)]
pub struct ShadowRecipe {
    pub network: NetworkSpec,
    pub federation: FederationConfig,
}

impl ShadowRecipe {
    pub fn train(&self, samples: &[Sample], seed: u64) -> Result<ParameterSet> {
        let k = self.federation.num_clients;
        let mut shards = vec![Vec::new(); k];
        for (i, s) in samples.iter().enumerate() {
            shards[i % k].push(s.clone());
        }
        let cfg = FederationConfig {
            seed,
            ..self.federation.clone()
        };
        Ok(federation::run_experiment(&cfg, &self.network, &shards, samples)?.final_params)
    }
}

/// Shadow-model membership inference against `target`.
///
/// Half of `shadow_pool` trains the shadow model; the threshold is fit on the
/// shadow model's confidences for its own members and non-members, then
/// applied to the target's confidences on the two evaluation pools.
pub fn mia_run<T, M, F>(
    target: &T,
    member_pool: &[Sample],
    nonmember_pool: &[Sample],
    shadow_pool: &[Sample],
    train_shadow: F,
    seed: u64,
) -> Result<AttackReport>
where
    T: ConfidenceModel + ?Sized,
    M: ConfidenceModel,
    F: FnOnce(&[Sample], u64) -> Result<M>,
{
    check_disjoint(&[
        ("member", member_pool),
        ("non-member", nonmember_pool),
        ("shadow", shadow_pool),
    ])?;
    if shadow_pool.len() < 4 {
        return Err(Error::Empty("shadow pool needs at least four samples".into()));
    }
    let mut shuffled = shadow_pool.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5AD0])));
    let (shadow_in, shadow_out) = shuffled.split_at(shuffled.len() / 2);
    let shadow = train_shadow(shadow_in, mix_seed(&[seed, 0x5AD1]))?;
    let (tau, shadow_balanced) = fit_threshold(&confidences(&shadow, shadow_in)?, &confidences(&shadow, shadow_out)?)?;

    let members = confidences(target, member_pool)?;
    let nonmembers = confidences(target, nonmember_pool)?;
    let tp = members.iter().filter(|&&c| c >= tau).count();
    let tn = nonmembers.iter().filter(|&&c| c < tau).count();
    let score = (tp + tn) as f64 / (members.len() + nonmembers.len()) as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AttackReport::new(
        AttackKind::Mia,
        score,
        [
            ("tau", tau),
            ("shadow_balanced_acc", shadow_balanced),
            ("member_conf", mean(&members)),
            ("nonmember_conf", mean(&nonmembers)),
        ],
    ))
}

/// One observed update with its known sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AiaTrial {
    pub observed: Vec<f64>,
    pub true_group: usize,
}

/// `theta' - theta` after one local step on `batch`.
pub fn one_step_delta(global: &ParameterSet, batch: &[Sample], step: &StepConfig) -> Result<Vec<f64>> {
    let (next, _) = local_train_step(global, batch, step)?;
    Ok(next.theta().iter().zip(global.theta()).map(|(a, b)| a - b).collect())
}

fn group_batch(pool: &[&Sample], size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..size).map(|_| (*pool.choose(rng).expect("non-empty")).clone()).collect()
}

fn by_group(pool: &[Sample], num_groups: usize) -> Vec<Vec<&Sample>> {
    let mut out = vec![Vec::new(); num_groups];
    for s in pool {
        if s.s < num_groups {
            out[s.s].push(s);
        }
    }
    out
}

/// Signature `g(s)` for each group: a one-step delta from `global` on a
/// group-pure batch drawn from `probe_pool`.
pub fn attribute_signatures(
    global: &ParameterSet,
    probe_pool: &[Sample],
    batch_size: usize,
    step: &StepConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let num_groups = global.layout().spec().num_groups;
    let groups = by_group(probe_pool, num_groups);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xA1A0]));
    groups
        .iter()
        .enumerate()
        .map(|(g, members)| {
            if members.is_empty() || batch_size == 0 {
                return Err(Error::Empty(format!("probe batch for group {g}")));
            }
            one_step_delta(global, &group_batch(members, batch_size, &mut rng), step)
        })
        .collect()
}

/// Index of the signature nearest to `observed` in L2.
pub fn infer_attribute(observed: &[f64], signatures: &[Vec<f64>]) -> Result<usize> {
    let mut best = None;
    for (g, sig) in signatures.iter().enumerate() {
        if sig.len() != observed.len() {
            return Err(Error::Shape("signature length differs from the update".into()));
        }
        let d: f64 = sig.iter().zip(observed).map(|(a, b)| (a - b).powi(2)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((g, d));
        }
    }
    best.map(|(g, _)| g).ok_or_else(|| Error::Empty("no candidate signatures".into()))
}

/// Victim updates on group-pure batches of `victim_pool`, cycling through
/// the groups present. `victim` carries the victim's own adversary head.
pub fn aia_trials(
    global: &ParameterSet,
    victim_pool: &[Sample],
    trials: usize,
    batch_size: usize,
    step: &StepConfig,
    seed: u64,
) -> Result<Vec<AiaTrial>> {
    let num_groups = global.layout().spec().num_groups;
    let groups = by_group(victim_pool, num_groups);
    let present: Vec<usize> = (0..num_groups).filter(|&g| !groups[g].is_empty()).collect();
    if present.is_empty() || batch_size == 0 {
        return Err(Error::Empty("victim pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xA1A1]));
    (0..trials)
        .map(|t| {
            let g = present[t % present.len()];
            Ok(AiaTrial {
                observed: one_step_delta(global, &group_batch(&groups[g], batch_size, &mut rng), step)?,
                true_group: g,
            })
        })
        .collect()
}

/// Nearest-signature attribute inference; the score is the fraction of
/// trials whose group is recovered.
pub fn aia_run(
    global: &ParameterSet,
    probe_pool: &[Sample],
    trials: &[AiaTrial],
    batch_size: usize,
    step: &StepConfig,
    seed: u64,
) -> Result<AttackReport> {
    if trials.is_empty() {
        return Err(Error::Empty("attribute inference trials".into()));
    }
    let signatures = attribute_signatures(global, probe_pool, batch_size, step, seed)?;
    let mut correct = 0usize;
    for t in trials {
        correct += usize::from(infer_attribute(&t.observed, &signatures)? == t.true_group);
    }
    Ok(AttackReport::new(
        AttackKind::Aia,
        correct as f64 / trials.len() as f64,
        [("trials", trials.len() as f64), ("candidates", signatures.len() as f64)],
    ))
}

/// Everything a paired clean/attacked run needs.
#[derive(Debug, Clone, Copy)]
pub struct PairedSetup<'a> {
    pub network: &'a NetworkSpec,
    pub federation: &'a FederationConfig,
    pub shards: &'a [Vec<Sample>],
    pub eval_set: &'a [Sample],
}

fn final_record(
    setup: &PairedSetup<'_>,
    cfg: &FederationConfig,
    shards: &[Vec<Sample>],
) -> Result<federation::Evaluation> {
    let out = federation::run_experiment(cfg, setup.network, shards, setup.eval_set)?;
    federation::evaluate(&out.final_params, setup.eval_set, &cfg.favourable_classes)
}

/// `D_Byz = A_clean - A_byzantine` from two runs that share a seed.
pub fn byzantine_run(setup: &PairedSetup<'_>, byzantine: ByzantineConfig, seed: u64) -> Result<AttackReport> {
    let clean_cfg = FederationConfig {
        seed,
        byzantine: None,
        ..setup.federation.clone()
    };
    let attacked_cfg = FederationConfig {
        byzantine: Some(byzantine),
        ..clean_cfg.clone()
    };
    let (clean, attacked) = rayon::join(
        || final_record(setup, &clean_cfg, setup.shards),
        || final_record(setup, &attacked_cfg, setup.shards),
    );
    let (clean, attacked) = (clean?, attacked?);
    Ok(AttackReport::new(
        AttackKind::Byzantine,
        clean.accuracy - attacked.accuracy,
        [
            ("clean_acc", clean.accuracy),
            ("attacked_acc", attacked.accuracy),
            ("malicious", byzantine.malicious_count(setup.federation.num_clients) as f64),
        ],
    ))
}

/// How a multiple of the mean update norm becomes an absolute noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbScale {
    /// One absolute scale per seed, measured on the clean FedAvg run and
    /// shared by every aggregator, so paired comparisons face the same attack.
    #[default]
    Reference,
    /// Each run scales by its own running mean update norm.
    PerRun,
}

/// `multiple x` the mean honest update norm of a clean FedAvg run on `setup`.
pub fn reference_perturb_std(setup: &PairedSetup<'_>, multiple: f64, seed: u64) -> Result<f64> {
    let cfg = FederationConfig {
        seed,
        aggregator: federation::Aggregator::Fedavg,
        dp: None,
        byzantine: None,
        ..setup.federation.clone()
    };
    let out = federation::run_experiment(&cfg, setup.network, setup.shards, setup.eval_set)?;
    if out.records.is_empty() {
        return Ok(0.0);
    }
    let mean = out.records.iter().map(|r| r.update_norm).sum::<f64>() / out.records.len() as f64;
    Ok(multiple * mean)
}

/// Resolves `byzantine` into a config with an absolute `perturb_std` when
/// `scale` asks for a shared reference.
pub fn resolve_byzantine(
    setup: &PairedSetup<'_>,
    byzantine: ByzantineConfig,
    scale: PerturbScale,
    seed: u64,
) -> Result<ByzantineConfig> {
    if scale == PerturbScale::PerRun || byzantine.perturb_std.is_some() || byzantine.is_inert() {
        return Ok(byzantine);
    }
    Ok(ByzantineConfig {
        perturb_std: Some(reference_perturb_std(setup, byzantine.norm_multiple, seed)?),
        ..byzantine
    })
}

/// Index of the client holding the most samples of `group`.
pub fn poisoned_client(shards: &[Vec<Sample>], group: usize) -> Option<usize> {
    shards
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.iter().filter(|x| x.s == group).count()))
        .filter(|&(_, n)| n > 0)
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
}

/// `EODD = EOD_poisoned - EOD_clean`, poisoning the client that holds the
/// most `target_group` samples. Injected clones come from the group's
/// favourable-class samples and carry flipped labels.
pub fn poisoning_run(setup: &PairedSetup<'_>, target_group: usize, rate: f64, seed: u64) -> Result<AttackReport> {
    let client = poisoned_client(setup.shards, target_group)
        .ok_or_else(|| Error::Empty(format!("no client holds group {target_group}")))?;
    let mut poisoned = setup.shards.to_vec();
    poisoned[client] = data::poison(
        &setup.shards[client],
        target_group,
        rate,
        setup.network.num_classes,
        &setup.federation.favourable_classes,
        mix_seed(&[seed, 0x9015]),
    )?;
    let cfg = FederationConfig {
        seed,
        ..setup.federation.clone()
    };
    let (clean, attacked) = rayon::join(
        || final_record(setup, &cfg, setup.shards),
        || final_record(setup, &cfg, &poisoned),
    );
    let (clean, attacked) = (clean?, attacked?);
    Ok(AttackReport::new(
        AttackKind::Poisoning,
        attacked.eod - clean.eod,
        [
            ("clean_eod", clean.eod),
            ("poisoned_eod", attacked.eod),
            ("clean_acc", clean.accuracy),
            ("poisoned_acc", attacked.accuracy),
            ("injected", (poisoned[client].len() - setup.shards[client].len()) as f64),
            ("client", client as f64),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, partition, SynthSpec};
    use crate::federation::{Aggregator, UfmSource};

    struct Constant(f64);
    impl ConfidenceModel for Constant {
        fn confidence(&self, _: &[f64]) -> Result<f64> {
            Ok(self.0)
        }
    }

    struct Oracle(HashSet<Vec<u64>>);
    impl ConfidenceModel for Oracle {
        fn confidence(&self, x: &[f64]) -> Result<f64> {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            Ok(if self.0.contains(&key) { 1.0 } else { 0.0 })
        }
    }

    /// Shadow that memorises its members perfectly.
    fn memorising_shadow(samples: &[Sample], _: u64) -> Result<Oracle> {
        Ok(Oracle(samples.iter().map(fingerprint).collect()))
    }

    fn pool(n: usize, offset: f64) -> Vec<Sample> {
        (0..n).map(|i| Sample { x: vec![offset + i as f64], y: i % 2, s: 0 }).collect()
    }

    #[test]
    fn threshold_fit() {
        let (tau, bal) = fit_threshold(&[0.9, 0.8, 0.95], &[0.5, 0.6, 0.7]).unwrap();
        assert_eq!(bal, 1.0);
        assert!(tau > 0.7 && tau <= 0.8);
        let (_, bal) = fit_threshold(&[0.5; 4], &[0.5; 4]).unwrap();
        assert_eq!(bal, 0.5);
        assert!(fit_threshold(&[], &[0.1]).is_err());
    }

    #[test]
    fn constant_target_is_chance() {
        let r = mia_run(&Constant(0.7), &pool(50, 0.0), &pool(50, 1000.0), &pool(40, 5000.0), memorising_shadow, 1)
            .unwrap();
        assert_eq!(r.score, 0.5);
    }

    #[test]
    fn oracle_target_is_perfect() {
        let members = pool(50, 0.0);
        let target = Oracle(members.iter().map(fingerprint).collect());
        let r = mia_run(&target, &members, &pool(50, 1000.0), &pool(40, 5000.0), memorising_shadow, 1).unwrap();
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn pools_must_be_disjoint_and_non_empty() {
        let a = pool(10, 0.0);
        assert!(mia_run(&Constant(0.5), &a, &a, &pool(10, 50.0), memorising_shadow, 1).is_err());
        assert!(mia_run(&Constant(0.5), &a, &[], &pool(10, 50.0), memorising_shadow, 1).is_err());
    }

    fn toy_network(d: usize, groups: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: d,
            hidden_dims: vec![16],
            num_classes: 2,
            num_groups: groups,
            activation: Default::default(),
        }
    }

    #[test]
    fn aia_exact_signature_match() {
        let sigs = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![5.0, 5.0]];
        for (g, s) in sigs.iter().enumerate() {
            assert_eq!(infer_attribute(s, &sigs).unwrap(), g);
        }
        assert!(infer_attribute(&[0.0], &[]).is_err());
    }

    #[test]
    fn aia_single_candidate_is_certain() {
        let spec = SynthSpec {
            input_dim: 4,
            num_groups: 2,
            samples_per_group: vec![40, 40],
            group_means: vec![vec![1.0, 1.0]; 2],
            label_flip_noise: vec![0.0; 2],
            ..SynthSpec::default()
        };
        let pool: Vec<Sample> = generate_dataset(&spec, 1)
            .unwrap()
            .into_iter()
            .map(|s| Sample { s: 0, ..s })
            .collect();
        let net = toy_network(4, 1);
        let global = federation::initial_params(&net, 3).unwrap();
        let step = StepConfig {
            lr: 0.01,
            adversary_lr: 0.01,
            lambda_uncertainty: 0.0,
            lambda_adv: 0.0,
        };
        let trials = aia_trials(&global, &pool, 10, 8, &step, 2).unwrap();
        let r = aia_run(&global, &pool, &trials, 8, &step, 4).unwrap();
        assert_eq!(r.score, 1.0);
        assert!(aia_run(&global, &[], &trials, 8, &step, 4).is_err());
    }

    fn paired_fixture() -> (NetworkSpec, FederationConfig, Vec<Vec<Sample>>, Vec<Sample>) {
        let spec = SynthSpec {
            input_dim: 6,
            samples_per_group: vec![60, 40, 30, 20],
            ..SynthSpec::default()
        };
        let train = generate_dataset(&spec, 1).unwrap();
        let test = generate_dataset(&spec, 2).unwrap();
        let shards = partition(&train, 4, 0.5, 3).unwrap();
        let cfg = FederationConfig {
            rounds: 3,
            local_iterations: 3,
            batch_size: 16,
            lr: 0.05,
            adversary_lr: 0.05,
            aggregator: Aggregator::Fedavg,
            ..FederationConfig::default()
        };
        (toy_network(6, 4), cfg, shards, test)
    }

    #[test]
    fn byzantine_zero_cases_are_exact() {
        let (net, cfg, shards, test) = paired_fixture();
        let setup = PairedSetup {
            network: &net,
            federation: &cfg,
            shards: &shards,
            eval_set: &test,
        };
        for (f, m) in [(0.0, 10.0), (0.25, 0.0)] {
            let byz = ByzantineConfig {
                malicious_fraction: f,
                norm_multiple: m,
                perturb_std: None,
                ufm_source: UfmSource::Submitted,
            };
            assert_eq!(byzantine_run(&setup, byz, 7).unwrap().score, 0.0);
        }
    }

    #[test]
    fn poisoning_zero_rate_is_exact_and_bounded() {
        let (net, cfg, shards, test) = paired_fixture();
        let setup = PairedSetup {
            network: &net,
            federation: &cfg,
            shards: &shards,
            eval_set: &test,
        };
        assert_eq!(poisoning_run(&setup, 3, 0.0, 5).unwrap().score, 0.0);
        let r = poisoning_run(&setup, 3, 0.2, 5).unwrap();
        assert!((-2.0..=2.0).contains(&r.score));
        assert!(r.auxiliary["injected"] > 0.0);
    }

    #[test]
    fn attack_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!("sybil".parse::<AttackKind>().is_err());
    }
}
