//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::PerturbScale;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::federation::{Aggregator, ByzantineConfig, DpConfig, FederationConfig, UfmSource};
use crate::nn::Activation;

pub const OUT_ENV: &str = "RESFL_SIM_OUT";

fn default_seeds() -> Vec<u64> {
    (1..=5).collect()
}

fn default_beta() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub aggregators: Vec<Aggregator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Dirichlet concentration of the client split.
    #[serde(default = "default_beta")]
    pub partition_beta: f64,
    pub data: SynthSpec,
    #[serde(default)]
    pub network: NetworkSection,
    pub federation: FederationConfig,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub attacks: AttackSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

/// Grid for `sweep`; when both lists are empty the eight ablation cells are used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub lambda_uncertainty: Vec<f64>,
    pub lambda_adv: Vec<f64>,
}

/// The eight `(lambda_uncertainty, lambda_adv)` ablation cells, including the
/// repeated `(0.1, 1)` cell.
pub const ABLATION_CELLS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (0.01, 1.0),
    (0.1, 1.0),
    (1.0, 1.0),
    (0.1, 0.01),
    (0.1, 0.1),
    (0.1, 1.0),
];

impl SweepSettings {
    /// Grid cells sorted by `(lambda_uncertainty, lambda_adv)`.
    pub fn cells(&self) -> Result<Vec<(f64, f64)>> {
        let mut cells: Vec<(f64, f64)> = if self.lambda_uncertainty.is_empty() && self.lambda_adv.is_empty() {
            ABLATION_CELLS.to_vec()
        } else {
            if self.lambda_uncertainty.is_empty() || self.lambda_adv.is_empty() {
                return Err(Error::Config(
                    "sweep: set both lambda_uncertainty and lambda_adv, or neither".into(),
                ));
            }
            self.lambda_uncertainty
                .iter()
                .flat_map(|&a| self.lambda_adv.iter().map(move |&b| (a, b)))
                .collect()
        };
        if cells.iter().any(|&(a, b)| !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0)) {
            return Err(Error::Config("sweep: grid values must be finite and >= 0".into()));
        }
        cells.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        Ok(cells)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSettings {
    pub mia: MiaSettings,
    pub aia: AiaSettings,
    pub byzantine: ByzantineSettings,
    pub poisoning: PoisoningSettings,
}

/// The membership-inference target is trained on a small member pool so that
/// it overfits; the overrides apply to that target and its shadow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaSettings {
    pub members: usize,
    pub rounds: Option<usize>,
    pub local_iterations: Option<usize>,
    pub lr: Option<f64>,
    pub noise_std: Option<f64>,
    /// Privacy budget used when the aggregator is fedavg_dp.
    pub dp_epsilon: Option<f64>,
}

impl Default for MiaSettings {
    fn default() -> Self {
        Self {
            members: 100,
            rounds: None,
            local_iterations: None,
            lr: None,
            noise_std: None,
            dp_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AiaSettings {
    pub trials: usize,
    pub batch_size: usize,
}

impl Default for AiaSettings {
    fn default() -> Self {
        Self {
            trials: 100,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByzantineSettings {
    pub malicious_fraction: f64,
    pub norm_multiple: f64,
    pub perturb_std: Option<f64>,
    pub ufm_source: UfmSource,
    pub scale: PerturbScale,
    /// Overrides the top-level `partition_beta` for this attack only.
    pub partition_beta: Option<f64>,
}

impl Default for ByzantineSettings {
    fn default() -> Self {
        Self {
            malicious_fraction: 0.25,
            norm_multiple: 10.0,
            perturb_std: None,
            ufm_source: UfmSource::Submitted,
            scale: PerturbScale::Reference,
            partition_beta: None,
        }
    }
}

impl ByzantineSettings {
    pub fn to_config(&self) -> ByzantineConfig {
        ByzantineConfig {
            malicious_fraction: self.malicious_fraction,
            norm_multiple: self.norm_multiple,
            perturb_std: self.perturb_std,
            ufm_source: self.ufm_source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisoningSettings {
    /// Defaults to the group with the fewest samples.
    pub target_group: Option<usize>,
    pub rate: f64,
}

impl Default for PoisoningSettings {
    fn default() -> Self {
        Self {
            target_group: None,
            rate: 0.2,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.to_string().trim_end())))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {}", origin.display(), strip_prefix(&e))))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.aggregators.is_empty() {
            return Err(Error::Config("aggregators must list at least one aggregator".into()));
        }
        if !(self.partition_beta > 0.0) || !self.partition_beta.is_finite() {
            return Err(Error::Config("partition_beta must be > 0".into()));
        }
        self.data.validate()?;
        crate::scenario::network_for(&self.data, &self.network.hidden_dims, self.network.activation).validate()?;
        for &agg in &self.aggregators {
            self.federation_for(agg, self.seeds[0])?.validate(self.data.num_classes)?;
        }
        self.sweep.cells()?;
        let b = &self.attacks.byzantine;
        if !(0.0..1.0).contains(&b.malicious_fraction) || !(b.norm_multiple >= 0.0) {
            return Err(Error::Config("attacks.byzantine: fraction in [0, 1) and norm_multiple >= 0".into()));
        }
        if b.partition_beta.is_some_and(|v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("attacks.byzantine.partition_beta must be > 0".into()));
        }
        let p = &self.attacks.poisoning;
        if !(0.0..=1.0).contains(&p.rate) {
            return Err(Error::Config("attacks.poisoning.rate must lie in [0, 1]".into()));
        }
        if p.target_group.is_some_and(|g| g >= self.data.num_groups) {
            return Err(Error::Config("attacks.poisoning.target_group out of range".into()));
        }
        if self.attacks.mia.members < 2 || self.attacks.aia.trials == 0 || self.attacks.aia.batch_size == 0 {
            return Err(Error::Config("attacks: mia.members >= 2, aia.trials and aia.batch_size >= 1".into()));
        }
        Ok(())
    }

    /// Federation settings for one run. The `[federation.dp]` table is kept
    /// only for the DP aggregator.
    pub fn federation_for(&self, aggregator: Aggregator, seed: u64) -> Result<FederationConfig> {
        let dp: Option<DpConfig> = match aggregator {
            Aggregator::FedavgDp => Some(self.federation.dp.ok_or_else(|| {
                Error::Config("aggregator fedavg_dp requires a [federation.dp] table with epsilon and clip".into())
            })?),
            _ => None,
        };
        Ok(FederationConfig {
            aggregator,
            seed,
            dp,
            ..self.federation.clone()
        })
    }

    pub fn poisoning_target(&self) -> usize {
        self.attacks.poisoning.target_group.unwrap_or_else(|| {
            (0..self.data.num_groups)
                .min_by_key(|&g| (self.data.samples_per_group[g], g))
                .expect("at least one group")
        })
    }

    /// Normalised TOML form with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// `--out`, then the config's `output_dir`, then `$RESFL_SIM_OUT`, then `out`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "aggregators = [\"fedavg\", \"resfl\"]\n[data]\n[federation]\nrounds = 3\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("t.toml")).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.federation.rounds, 3);
        assert_eq!(cfg.data, SynthSpec::default());
        assert_eq!(cfg.partition_beta, 0.5);
    }

    #[test]
    fn missing_key_is_named() {
        let err = ExperimentConfig::parse("[data]\n[federation]\n", Path::new("t.toml")).unwrap_err();
        assert!(err.to_string().contains("aggregators"), "{err}");
        let err = ExperimentConfig::parse("aggregators = [\"fedavg\"]\n[data]\n", Path::new("t.toml")).unwrap_err();
        assert!(err.to_string().contains("federation"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let text = "aggregators = [\"fedavg\"]\n[data]\n[federation]\nroundz = 3\n";
        let err = ExperimentConfig::parse(text, Path::new("t.toml")).unwrap_err().to_string();
        assert!(err.contains("roundz") && err.contains("line 4"), "{err}");
    }

    #[test]
    fn dp_requires_its_table() {
        let text = "aggregators = [\"fedavg_dp\"]\n[data]\n[federation]\n";
        assert!(ExperimentConfig::parse(text, Path::new("t.toml")).is_err());
        let text = "aggregators = [\"fedavg_dp\", \"resfl\"]\n[data]\n[federation]\n[federation.dp]\nepsilon = 0.1\nclip = 1.0\n";
        let cfg = ExperimentConfig::parse(text, Path::new("t.toml")).unwrap();
        assert!(cfg.federation_for(Aggregator::Resfl, 1).unwrap().dp.is_none());
        assert!(cfg.federation_for(Aggregator::FedavgDp, 1).unwrap().dp.is_some());
    }

    #[test]
    fn normalised_form_round_trips() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("t.toml")).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text, Path::new("n.toml")).unwrap(), cfg);
    }

    #[test]
    fn sweep_cells() {
        let default = SweepSettings::default().cells().unwrap();
        assert_eq!(default.len(), 8);
        assert!(default.windows(2).all(|w| (w[0].0, w[0].1) <= (w[1].0, w[1].1)));
        let grid = SweepSettings {
            lambda_uncertainty: vec![1.0, 0.0],
            lambda_adv: vec![0.0, 1.0],
        };
        assert_eq!(grid.cells().unwrap(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
        let bad = SweepSettings {
            lambda_uncertainty: vec![-1.0],
            lambda_adv: vec![0.0],
        };
        assert!(bad.cells().is_err());
    }

    #[test]
    fn poisoning_target_defaults_to_smallest_group() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("t.toml")).unwrap();
        assert_eq!(cfg.poisoning_target(), 3);
    }
}
