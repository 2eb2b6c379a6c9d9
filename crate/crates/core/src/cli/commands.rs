//! Orchestration behind `run`, `sweep`, `attack` and `report`, plus the
//! files each one writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::attacks::{self, AttackKind, AttackReport, PairedSetup, ShadowRecipe};
use crate::data::{generate_dataset, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{self, mix_seed, Aggregator, DpConfig, Evaluation, FederationConfig, RoundRecord};
use crate::metrics::{fmt6, MetricsRow};
use crate::nn::ParameterSet;
use crate::probe::{balanced_group_probe, ProbeConfig};
use crate::scenario::{auxiliary_dataset, network_for, Scenario};

const STREAM_PROBE: u64 = 0x960B;
const STREAM_MIA_POOL: u64 = 0x313A;
const STREAM_MIA_PICK: u64 = 0x313B;
const STREAM_AIA: u64 = 0xA1A5;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ATTACKS_FILE: &str = "attacks.csv";
pub const REPORT_FILE: &str = "report.md";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

pub const SWEEP_HEADER: &str = "lambda_uncertainty,lambda_adv,accuracy,di_dev,delta_eop,mia_sr,aia_sr";
pub const ATTACKS_HEADER: &str = "attack,algo,seed,score,aux";

/// The seeded data draw shared by every aggregator on one seed.
pub fn scenario_for(cfg: &ExperimentConfig, seed: u64, beta: f64) -> Result<Scenario> {
    Scenario::generate(
        &cfg.data,
        &cfg.network.hidden_dims,
        cfg.network.activation,
        cfg.federation.num_clients,
        beta,
        seed,
    )
}

/// Held-out accuracy of a fresh linear probe predicting the group from the
/// frozen latents of `params` on `eval_set`.
pub fn latent_probe(params: &ParameterSet, eval_set: &[Sample], num_groups: usize, seed: u64) -> Result<f64> {
    let h = federation::latents(params, eval_set)?;
    let groups: Vec<usize> = eval_set.iter().map(|s| s.s).collect();
    balanced_group_probe(&h, &groups, num_groups, mix_seed(&[seed, STREAM_PROBE]), &ProbeConfig::default())
}

/// One aggregator on one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub algo: Aggregator,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: ParameterSet,
    pub evaluation: Evaluation,
    pub probe_accuracy: f64,
}

impl SeedRun {
    /// UFM mean of the last round; `None` when no round ran.
    pub fn final_ufm_mean(&self) -> Option<f64> {
        self.records.last().map(|r| r.ufm_mean)
    }
}

pub fn run_one(cfg: &ExperimentConfig, scenario: &Scenario, algo: Aggregator, seed: u64) -> Result<SeedRun> {
    let fed = cfg.federation_for(algo, seed)?;
    let out = federation::run_experiment(&fed, &scenario.network, &scenario.shards, &scenario.test)?;
    let evaluation = federation::evaluate(&out.final_params, &scenario.test, &fed.favourable_classes)?;
    let probe_accuracy = latent_probe(&out.final_params, &scenario.test, cfg.data.num_groups, seed)?;
    Ok(SeedRun {
        algo,
        seed,
        records: out.records,
        final_params: out.final_params,
        evaluation,
        probe_accuracy,
    })
}

/// Every configured aggregator on every seed, ordered by seed then by the
/// aggregator order of the config.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    let per_seed: Vec<Result<Vec<SeedRun>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let scenario = scenario_for(cfg, seed, cfg.partition_beta)?;
            cfg.aggregators
                .par_iter()
                .map(|&algo| run_one(cfg, &scenario, algo, seed))
                .collect()
        })
        .collect();
    Ok(per_seed.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn metrics_rows(runs: &[SeedRun]) -> Vec<MetricsRow> {
    runs.iter()
        .flat_map(|run| {
            run.records.iter().map(move |r| MetricsRow {
                algo: run.algo.name().to_string(),
                seed: run.seed,
                round: r.round,
                accuracy: r.accuracy,
                group_accuracy: r.group_accuracy.clone(),
                di_dev: r.di_dev,
                delta_eop: r.delta_eop,
                eod: r.eod,
                ufm_mean: r.ufm_mean,
                unc_var: r.uncertainty_variance,
            })
        })
        .collect()
}

/// Final-round metrics of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub accuracy: f64,
    pub di_dev: f64,
    pub delta_eop: f64,
    pub eod: f64,
    pub ufm_mean: Option<f64>,
    pub uncertainty_mean: f64,
    pub uncertainty_variance: f64,
    pub probe_accuracy: f64,
}

/// Means over seeds of the final-round metrics of one aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoSummary {
    pub algo: Aggregator,
    pub accuracy: f64,
    pub di_dev: f64,
    pub delta_eop: f64,
    pub eod: f64,
    pub ufm_mean: Option<f64>,
    pub uncertainty_mean: f64,
    pub uncertainty_variance: f64,
    pub probe_accuracy: f64,
    pub per_seed: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub num_groups: usize,
    /// Accuracy of a probe that guesses the group uniformly.
    pub probe_chance: f64,
    pub algorithms: Vec<AlgoSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn summarise(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Summary {
    let algorithms = cfg
        .aggregators
        .iter()
        .map(|&algo| {
            let per_seed: Vec<SeedSummary> = runs
                .iter()
                .filter(|r| r.algo == algo)
                .map(|r| SeedSummary {
                    seed: r.seed,
                    accuracy: r.evaluation.accuracy,
                    di_dev: r.evaluation.di_dev,
                    delta_eop: r.evaluation.delta_eop,
                    eod: r.evaluation.eod,
                    ufm_mean: r.final_ufm_mean(),
                    uncertainty_mean: r.evaluation.uncertainty_mean,
                    uncertainty_variance: r.evaluation.uncertainty_variance,
                    probe_accuracy: r.probe_accuracy,
                })
                .collect();
            let m = |f: fn(&SeedSummary) -> f64| mean(per_seed.iter().map(f));
            let ufm: Option<Vec<f64>> = per_seed.iter().map(|s| s.ufm_mean).collect();
            AlgoSummary {
                algo,
                accuracy: m(|s| s.accuracy),
                di_dev: m(|s| s.di_dev),
                delta_eop: m(|s| s.delta_eop),
                eod: m(|s| s.eod),
                ufm_mean: ufm.map(|v| mean(v.into_iter())),
                uncertainty_mean: m(|s| s.uncertainty_mean),
                uncertainty_variance: m(|s| s.uncertainty_variance),
                probe_accuracy: m(|s| s.probe_accuracy),
                per_seed,
            }
        })
        .collect();
    Summary {
        rounds: cfg.federation.rounds,
        num_groups: cfg.data.num_groups,
        probe_chance: 1.0 / cfg.data.num_groups as f64,
        algorithms,
    }
}

fn draw(pool: &[Sample], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    if count > pool.len() {
        return Err(Error::Config(format!("need {count} samples but only {} exist", pool.len())));
    }
    let mut picked = index::sample(rng, pool.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Shadow-model membership inference against `target`, whose members are
/// `members`, with a shadow model trained by the target's own recipe.
pub fn mia_against(
    target: &ParameterSet,
    members: &[Sample],
    nonmember_pool: &[Sample],
    shadow_source: &[Sample],
    recipe: &ShadowRecipe,
    seed: u64,
) -> Result<AttackReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_MIA_PICK]));
    let nonmembers = draw(nonmember_pool, members.len(), &mut rng)?;
    let shadow_pool = draw(shadow_source, 2 * members.len(), &mut rng)?;
    attacks::mia_run(target, members, &nonmembers, &shadow_pool, |s, sd| recipe.train(s, sd), seed)
}

/// Gradient-matching attribute inference against `global`.
///
/// Each client is a victim: its one-step updates use its own private
/// adversary head `client_phi[k]` on its shard, while the attacker builds
/// signatures from `global`, whose head it initialised, on an auxiliary draw.
/// Trials are split evenly over the clients.
pub fn aia_against(
    cfg: &ExperimentConfig,
    global: &ParameterSet,
    client_phi: &[Vec<f64>],
    shards: &[Vec<Sample>],
    fed: &FederationConfig,
    seed: u64,
) -> Result<AttackReport> {
    let settings = &cfg.attacks.aia;
    let step = fed.step_config();
    let k = shards.len().min(client_phi.len());
    if k == 0 {
        return Err(Error::Empty("attribute inference needs at least one client".into()));
    }
    let mut trials = Vec::with_capacity(settings.trials);
    for (id, (phi, shard)) in client_phi.iter().zip(shards).enumerate() {
        let count = settings.trials / k + usize::from(id < settings.trials % k);
        if count == 0 {
            continue;
        }
        let mut victim = global.clone();
        victim.phi_mut().copy_from_slice(phi);
        trials.extend(attacks::aia_trials(
            &victim,
            shard,
            count,
            settings.batch_size,
            &step,
            mix_seed(&[seed, STREAM_AIA, 0, id as u64]),
        )?);
    }
    let probe_pool = auxiliary_dataset(&cfg.data, seed)?;
    attacks::aia_run(global, &probe_pool, &trials, settings.batch_size, &step, mix_seed(&[seed, STREAM_AIA, 1]))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda_uncertainty: f64,
    pub lambda_adv: f64,
    pub accuracy: f64,
    pub di_dev: f64,
    pub delta_eop: f64,
    pub mia_sr: f64,
    pub aia_sr: f64,
}

struct CellSeed {
    accuracy: f64,
    di_dev: f64,
    delta_eop: f64,
    mia: f64,
    aia: f64,
}

fn sweep_cell_seed(cfg: &ExperimentConfig, scenario: &Scenario, cell: (f64, f64), seed: u64) -> Result<CellSeed> {
    let fed = FederationConfig {
        lambda_uncertainty: cell.0,
        lambda_adv: cell.1,
        ..cfg.federation_for(Aggregator::Resfl, seed)?
    };
    let out = federation::run_experiment(&fed, &scenario.network, &scenario.shards, &scenario.test)?;
    let eval = federation::evaluate(&out.final_params, &scenario.test, &fed.favourable_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_MIA_POOL]));
    let members = draw(&scenario.train, cfg.attacks.mia.members.min(scenario.train.len()), &mut rng)?;
    let recipe = ShadowRecipe {
        network: scenario.network.clone(),
        federation: fed.clone(),
    };
    let shadow_source = auxiliary_dataset(&cfg.data, seed)?;
    let mia = mia_against(&out.final_params, &members, &scenario.test, &shadow_source, &recipe, seed)?;
    let aia = aia_against(cfg, &out.final_params, &out.client_phi, &scenario.shards, &fed, seed)?;
    Ok(CellSeed {
        accuracy: eval.accuracy,
        di_dev: eval.di_dev,
        delta_eop: eval.delta_eop,
        mia: mia.score,
        aia: aia.score,
    })
}

/// RESFL over every sweep cell, seed means per cell, sorted by
/// `(lambda_uncertainty, lambda_adv)`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let cells = cfg.sweep.cells()?;
    let scenarios: Vec<Scenario> = cfg
        .seeds
        .par_iter()
        .map(|&seed| scenario_for(cfg, seed, cfg.partition_beta))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.seeds.len()).map(move |s| (c, s)))
        .collect();
    let results: Vec<CellSeed> = jobs
        .par_iter()
        .map(|&(c, s)| sweep_cell_seed(cfg, &scenarios[s], cells[c], cfg.seeds[s]))
        .collect::<Result<_>>()?;
    let n = cfg.seeds.len();
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(l1, la))| {
            let chunk = &results[c * n..(c + 1) * n];
            SweepRow {
                lambda_uncertainty: l1,
                lambda_adv: la,
                accuracy: mean(chunk.iter().map(|r| r.accuracy)),
                di_dev: mean(chunk.iter().map(|r| r.di_dev)),
                delta_eop: mean(chunk.iter().map(|r| r.delta_eop)),
                mia_sr: mean(chunk.iter().map(|r| r.mia)),
                aia_sr: mean(chunk.iter().map(|r| r.aia)),
            }
        })
        .collect())
}

fn finite(v: f64, what: &str) -> Result<String> {
    if v.is_finite() {
        Ok(fmt6(v))
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

pub fn render_sweep(rows: &[SweepRow]) -> Result<String> {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let fields = [
            r.lambda_uncertainty,
            r.lambda_adv,
            r.accuracy,
            r.di_dev,
            r.delta_eop,
            r.mia_sr,
            r.aia_sr,
        ]
        .iter()
        .map(|&v| finite(v, "sweep row"))
        .collect::<Result<Vec<_>>>()?;
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// The MIA target: overfit on a small member set spread over the clients.
pub fn mia_attack(cfg: &ExperimentConfig, algo: Aggregator, seed: u64) -> Result<AttackReport> {
    let settings = &cfg.attacks.mia;
    let spec = SynthSpec {
        noise_std: settings.noise_std.unwrap_or(cfg.data.noise_std),
        ..cfg.data.clone()
    };
    let network = network_for(&spec, &cfg.network.hidden_dims, cfg.network.activation);
    let base = cfg.federation_for(algo, seed)?;
    let dp = match (base.dp, settings.dp_epsilon) {
        (Some(dp), Some(epsilon)) => Some(DpConfig { epsilon, ..dp }),
        (dp, _) => dp,
    };
    let fed = FederationConfig {
        rounds: settings.rounds.unwrap_or(base.rounds),
        local_iterations: settings.local_iterations.unwrap_or(base.local_iterations),
        lr: settings.lr.unwrap_or(base.lr),
        dp,
        ..base
    };
    let pool = generate_dataset(&spec, mix_seed(&[seed, STREAM_MIA_POOL]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_MIA_PICK, 0]));
    let mut order = index::sample(&mut rng, pool.len(), pool.len()).into_vec();
    let rest = order.split_off(settings.members.min(order.len()));
    let members: Vec<Sample> = order.iter().map(|&i| pool[i].clone()).collect();
    let nonmember_pool: Vec<Sample> = rest.iter().map(|&i| pool[i].clone()).collect();
    let mut shards = vec![Vec::new(); fed.num_clients];
    for (i, s) in members.iter().enumerate() {
        shards[i % fed.num_clients].push(s.clone());
    }
    let target = federation::run_experiment(&fed, &network, &shards, &nonmember_pool)?.final_params;
    let recipe = ShadowRecipe { network, federation: fed };
    let shadow_source = auxiliary_dataset(&spec, seed)?;
    mia_against(&target, &members, &nonmember_pool, &shadow_source, &recipe, seed)
}

pub fn aia_attack(cfg: &ExperimentConfig, scenario: &Scenario, algo: Aggregator, seed: u64) -> Result<AttackReport> {
    let fed = cfg.federation_for(algo, seed)?;
    let out = federation::run_experiment(&fed, &scenario.network, &scenario.shards, &scenario.test)?;
    aia_against(cfg, &out.final_params, &out.client_phi, &scenario.shards, &fed, seed)
}

/// Paired Byzantine runs for every configured aggregator on one seed. With
/// the reference scale all aggregators face the same absolute noise.
pub fn byzantine_attacks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(Aggregator, AttackReport)>> {
    let settings = &cfg.attacks.byzantine;
    let beta = settings.partition_beta.unwrap_or(cfg.partition_beta);
    let scenario = scenario_for(cfg, seed, beta)?;
    let reference_fed = cfg.federation_for(Aggregator::Fedavg, seed)?;
    let reference = PairedSetup {
        network: &scenario.network,
        federation: &reference_fed,
        shards: &scenario.shards,
        eval_set: &scenario.test,
    };
    let byzantine = attacks::resolve_byzantine(&reference, settings.to_config(), settings.scale, seed)?;
    cfg.aggregators
        .par_iter()
        .map(|&algo| {
            let fed = cfg.federation_for(algo, seed)?;
            let setup = PairedSetup {
                federation: &fed,
                ..reference
            };
            Ok((algo, attacks::byzantine_run(&setup, byzantine, seed)?))
        })
        .collect()
}

pub fn poisoning_attack(cfg: &ExperimentConfig, scenario: &Scenario, algo: Aggregator, seed: u64) -> Result<AttackReport> {
    let fed = cfg.federation_for(algo, seed)?;
    let setup = PairedSetup {
        network: &scenario.network,
        federation: &fed,
        shards: &scenario.shards,
        eval_set: &scenario.test,
    };
    attacks::poisoning_run(&setup, cfg.poisoning_target(), cfg.attacks.poisoning.rate, seed)
}

/// One `attacks.csv` line.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub algo: Aggregator,
    pub seed: u64,
    pub report: AttackReport,
}

/// Runs `kind` for every seed and aggregator of `cfg`.
pub fn attack(cfg: &ExperimentConfig, kind: AttackKind) -> Result<Vec<AttackRow>> {
    let per_seed: Vec<Result<Vec<AttackRow>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let reports: Vec<(Aggregator, AttackReport)> = match kind {
                AttackKind::Mia => cfg
                    .aggregators
                    .par_iter()
                    .map(|&a| Ok((a, mia_attack(cfg, a, seed)?)))
                    .collect::<Result<_>>()?,
                AttackKind::Byzantine => byzantine_attacks(cfg, seed)?,
                AttackKind::Aia | AttackKind::Poisoning => {
                    let scenario = scenario_for(cfg, seed, cfg.partition_beta)?;
                    cfg.aggregators
                        .par_iter()
                        .map(|&a| {
                            let r = if kind == AttackKind::Aia {
                                aia_attack(cfg, &scenario, a, seed)?
                            } else {
                                poisoning_attack(cfg, &scenario, a, seed)?
                            };
                            Ok((a, r))
                        })
                        .collect::<Result<_>>()?
                }
            };
            Ok(reports
                .into_iter()
                .map(|(algo, report)| AttackRow { algo, seed, report })
                .collect())
        })
        .collect();
    Ok(per_seed.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn attack_line(row: &AttackRow) -> Result<String> {
    let aux = row
        .report
        .auxiliary
        .iter()
        .map(|(k, v)| Ok(format!("{k}={}", finite(*v, "attack auxiliary value")?)))
        .collect::<Result<Vec<_>>>()?
        .join(";");
    Ok(format!(
        "{},{},{},{},{aux}",
        row.report.kind.name(),
        row.algo.name(),
        row.seed,
        finite(row.report.score, "attack score")?
    ))
}

type AttackKey = (String, String, u64);

fn attack_key(line: &str) -> Result<AttackKey> {
    let mut parts = line.splitn(4, ',');
    let (Some(kind), Some(algo), Some(seed), Some(_)) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Parse(format!("malformed attacks row: {line}")));
    };
    let seed = seed
        .parse()
        .map_err(|_| Error::Parse(format!("bad seed in attacks row: {line}")))?;
    Ok((kind.to_string(), algo.to_string(), seed))
}

/// Merges `rows` into an existing `attacks.csv` body: rows with the same
/// `(attack, algo, seed)` are replaced, the rest kept, all sorted by key.
pub fn upsert_attacks(existing: Option<&str>, rows: &[AttackRow]) -> Result<String> {
    let mut table: BTreeMap<AttackKey, String> = BTreeMap::new();
    if let Some(text) = existing {
        let mut lines = text.lines();
        match lines.next() {
            Some(ATTACKS_HEADER) | None => {}
            Some(other) => return Err(Error::Parse(format!("unexpected attacks.csv header: {other}"))),
        }
        for line in lines.filter(|l| !l.is_empty()) {
            table.insert(attack_key(line)?, line.to_string());
        }
    }
    for row in rows {
        let line = attack_line(row)?;
        table.insert(attack_key(&line)?, line);
    }
    let mut out = format!("{ATTACKS_HEADER}\n");
    for line in table.values() {
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_attacks(path: &Path, rows: &[AttackRow]) -> Result<()> {
    let existing = read_optional(path)?;
    write_file(path, &upsert_attacks(existing.as_deref(), rows)?)
}

fn opt6(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), fmt6)
}

fn markdown_csv(out: &mut String, csv: &str) {
    let mut lines = csv.lines();
    if let Some(header) = lines.next() {
        let cols: Vec<&str> = header.split(',').collect();
        let _ = writeln!(out, "| {} |", cols.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
        for line in lines.filter(|l| !l.is_empty()) {
            let _ = writeln!(out, "| {} |", line.split(',').collect::<Vec<_>>().join(" | "));
        }
    }
}

/// Markdown digest of whatever result files exist under `dir`.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut out = String::from("# resfl-sim report\n");
    let mut found = false;
    if let Some(text) = read_optional(&dir.join(SUMMARY_FILE))? {
        found = true;
        let s: Summary = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{SUMMARY_FILE}: {e}")))?;
        let _ = writeln!(
            out,
            "\n## Final round, mean over seeds\n\n{} rounds, {} groups, probe chance {}.\n",
            s.rounds,
            s.num_groups,
            fmt6(s.probe_chance)
        );
        out.push_str("| algo | seeds | accuracy | di_dev | delta_eop | eod | ufm_mean | unc_var | probe |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for a in &s.algorithms {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                a.algo,
                a.per_seed.len(),
                fmt6(a.accuracy),
                fmt6(a.di_dev),
                fmt6(a.delta_eop),
                fmt6(a.eod),
                opt6(a.ufm_mean),
                fmt6(a.uncertainty_variance),
                fmt6(a.probe_accuracy)
            );
        }
    }
    if let Some(text) = read_optional(&dir.join(SWEEP_FILE))? {
        found = true;
        out.push_str("\n## Ablation sweep (RESFL)\n\n");
        markdown_csv(&mut out, &text);
    }
    if let Some(text) = read_optional(&dir.join(ATTACKS_FILE))? {
        found = true;
        let mut scores: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let (kind, algo, _) = attack_key(line)?;
            let score: f64 = line
                .split(',')
                .nth(3)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad score in attacks row: {line}")))?;
            scores.entry((kind, algo)).or_default().push(score);
        }
        out.push_str("\n## Attacks, mean score over seeds\n\n| attack | algo | seeds | score |\n|---|---|---|---|\n");
        for ((kind, algo), v) in &scores {
            let _ = writeln!(out, "| {kind} | {algo} | {} | {} |", v.len(), fmt6(mean(v.iter().copied())));
        }
    }
    if !found {
        return Err(Error::Empty(format!(
            "no {SUMMARY_FILE}, {SWEEP_FILE} or {ATTACKS_FILE} under {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(kind: AttackKind, score: f64) -> AttackReport {
        AttackReport::new(kind, score, [("b", 2.0), ("a", 0.5)])
    }

    #[test]
    fn attack_rows_are_upserted_and_sorted() {
        let first = upsert_attacks(
            None,
            &[
                AttackRow { algo: Aggregator::Resfl, seed: 2, report: report(AttackKind::Mia, 0.7) },
                AttackRow { algo: Aggregator::Fedavg, seed: 10, report: report(AttackKind::Byzantine, -0.25) },
            ],
        )
        .unwrap();
        assert_eq!(
            first,
            "attack,algo,seed,score,aux\n\
             byzantine,fedavg,10,-0.250000,a=0.500000;b=2.000000\n\
             mia,resfl,2,0.700000,a=0.500000;b=2.000000\n"
        );
        let second = upsert_attacks(
            Some(&first),
            &[AttackRow { algo: Aggregator::Resfl, seed: 2, report: report(AttackKind::Mia, 0.6) }],
        )
        .unwrap();
        assert!(second.contains("mia,resfl,2,0.600000,"));
        assert!(second.contains("byzantine,fedavg,10,"));
        assert_eq!(second.lines().count(), 3);
        assert!(upsert_attacks(Some("nonsense\n"), &[]).is_err());
    }

    #[test]
    fn sweep_csv_shape() {
        let row = SweepRow {
            lambda_uncertainty: 0.1,
            lambda_adv: 1.0,
            accuracy: 0.5,
            di_dev: 0.0,
            delta_eop: 0.25,
            mia_sr: 0.5,
            aia_sr: 0.125,
        };
        assert_eq!(
            render_sweep(&[row]).unwrap(),
            format!("{SWEEP_HEADER}\n0.100000,1.000000,0.500000,0.000000,0.250000,0.500000,0.125000\n")
        );
        assert!(render_sweep(&[SweepRow { accuracy: f64::NAN, ..row }]).is_err());
    }

    #[test]
    fn report_needs_some_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_report(dir.path()).is_err());
        write_file(&dir.path().join(SWEEP_FILE), &format!("{SWEEP_HEADER}\n0,1,0.5,0,0,0.5,0.25\n")).unwrap();
        let md = render_report(dir.path()).unwrap();
        assert!(md.contains("| lambda_uncertainty | lambda_adv |"));
        assert!(md.contains("| 0 | 1 | 0.5 |"));
    }
}
