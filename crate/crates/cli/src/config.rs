//! Experiment configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use purilab::distributions::{MixtureComponent, MixtureDistribution};
use purilab::timegrid::{KarrasGrid, DEFAULT_EPS, DEFAULT_N, DEFAULT_RHO, DEFAULT_T_MAX};
use purilab::transport::DEFAULT_R_GRID;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub distribution: DistributionSpec,
    pub grid: GridConfig,
    pub purifier: PurifierConfig,
    pub classifier: ClassifierSpec,
    pub smoothing: SmoothingConfig,
    pub training: TrainingConfig,
    pub finetune: FinetuneSection,
    pub transport: TransportConfig,
    pub ode_demo: OdeDemoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("out"),
            distribution: DistributionSpec::default(),
            grid: GridConfig::default(),
            purifier: PurifierConfig::default(),
            classifier: ClassifierSpec::default(),
            smoothing: SmoothingConfig::default(),
            training: TrainingConfig::default(),
            finetune: FinetuneSection::default(),
            transport: TransportConfig::default(),
            ode_demo: OdeDemoConfig::default(),
        }
    }
}

/// Where the data distribution comes from: a file, inline components, or a
/// named preset (`two-dirac`, `four-cluster`), in that order of precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionSpec {
    pub preset: String,
    pub file: Option<PathBuf>,
    pub components: Vec<ComponentSpec>,
    /// Center offset `c` of the four-cluster preset.
    pub cluster_center: f64,
    pub cluster_scale: f64,
}

impl Default for DistributionSpec {
    fn default() -> Self {
        Self {
            preset: "two-dirac".into(),
            file: None,
            components: Vec::new(),
            cluster_center: 2.0,
            cluster_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub center: Vec<f64>,
    #[serde(default)]
    pub scale: f64,
    pub weight: f64,
    pub label: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    component: Vec<ComponentSpec>,
}

fn build_mixture(specs: &[ComponentSpec]) -> Result<MixtureDistribution, CliError> {
    let comps = specs
        .iter()
        .map(|c| MixtureComponent::gaussian(c.center.clone(), c.scale, c.weight, c.label))
        .collect();
    MixtureDistribution::new(comps).map_err(|e| CliError::Config(format!("distribution: {e}")))
}

impl DistributionSpec {
    pub fn resolve(&self) -> Result<MixtureDistribution, CliError> {
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!(
                    "cannot read distribution file {}: {e}",
                    path.display()
                ))
            })?;
            let file: DistributionFile = toml::from_str(&text).map_err(|e| {
                CliError::Config(format!("distribution file {}: {e}", path.display()))
            })?;
            return build_mixture(&file.component);
        }
        if !self.components.is_empty() {
            return build_mixture(&self.components);
        }
        match self.preset.as_str() {
            "two-dirac" => Ok(MixtureDistribution::two_dirac()),
            "four-cluster" => Ok(MixtureDistribution::four_cluster_2d(
                self.cluster_center,
                self.cluster_scale,
            )),
            other => Err(CliError::Config(format!(
                "unknown distribution preset '{other}' (expected two-dirac or four-cluster)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            t_max: DEFAULT_T_MAX,
            rho: DEFAULT_RHO,
            n: DEFAULT_N,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<KarrasGrid, CliError> {
        KarrasGrid::new(self.eps, self.t_max, self.rho, self.n)
            .map_err(|e| CliError::Config(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifierConfig {
    /// onestep, pfode, sde, cm-oracle or cm-net.
    pub kind: String,
    pub checkpoint: Option<PathBuf>,
    /// euler or heun, for the pfode purifier.
    pub solver: String,
    pub ode_steps: usize,
    /// Final time of the ODE purifiers; defaults to the grid's ε.
    pub t_end: Option<f64>,
    pub oracle_steps: usize,
    pub sde_steps: usize,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        Self {
            kind: "onestep".into(),
            checkpoint: None,
            solver: "heun".into(),
            ode_steps: 18,
            t_end: None,
            oracle_steps: 400,
            sde_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    /// nearest-centroid (on the distribution's centers) or logistic.
    pub kind: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub labels: Vec<u32>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: "nearest-centroid".into(),
            weights: Vec::new(),
            bias: 0.0,
            labels: vec![0, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigmas: Vec<f64>,
    pub n0: usize,
    pub n_cert: usize,
    pub alpha: f64,
    pub num_points: usize,
    pub eps_grid: Vec<f64>,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.25, 0.5, 1.0],
            n0: purilab::smoothing::DEFAULT_N0,
            n_cert: purilab::smoothing::DEFAULT_N_CERT,
            alpha: purilab::smoothing::DEFAULT_ALPHA,
            num_points: 100,
            eps_grid: (0..=40).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub activation: String,
    pub frequencies: usize,
    pub sigma_data: f64,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// l1, l2 or feature.
    pub loss: String,
    pub feature_seed: u64,
    pub log_every: usize,
    /// Draws per σ for the evaluations written to the training log.
    pub eval_draws: usize,
    pub eval_sigmas: Vec<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: "tanh".into(),
            frequencies: 8,
            sigma_data: 0.5,
            batch: 256,
            iters: 4000,
            lr: 1e-3,
            ema_decay: 0.999,
            loss: "l2".into(),
            feature_seed: 0,
            log_every: 500,
            eval_draws: 1000,
            eval_sigmas: vec![0.25, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub sigmas: Vec<f64>,
    /// discrete or continuous.
    pub schedule: String,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub loss: String,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.25, 0.5, 1.0],
            schedule: "discrete".into(),
            batch: 256,
            iters: 2000,
            lr: 1e-4,
            loss: "feature".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub sigmas: Vec<f64>,
    pub n: usize,
    pub r_grid: Vec<f64>,
    /// Purifier kinds to compare; empty means every kind available.
    pub purifiers: Vec<String>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.25, 0.5, 0.75, 1.0],
            n: 10_000,
            r_grid: DEFAULT_R_GRID.to_vec(),
            purifiers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeDemoConfig {
    pub trajectories: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    /// Starts and field samples span `[-x_range, x_range]`.
    pub x_range: f64,
    pub field_points: usize,
    pub field_times: Vec<f64>,
}

impl Default for OdeDemoConfig {
    fn default() -> Self {
        Self {
            trajectories: 20,
            t_start: 1.0,
            t_end: 1e-4,
            steps: 400,
            x_range: 3.0,
            field_points: 121,
            field_times: vec![0.1, 0.25, 0.5, 1.0, 2.0],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form, excluding settings that cannot
    /// affect results (worker count, output directory).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sede = 3").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[grid]\nepsilon = 0.1").is_err());
    }

    #[test]
    fn hash_ignores_workers_and_out_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.workers = 8;
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn inline_components_resolve() {
        let cfg: ExperimentConfig = toml::from_str(
            "[[distribution.components]]\ncenter = [0.0, 1.0]\nweight = 1.0\nlabel = 3\n",
        )
        .unwrap();
        let d = cfg.distribution.resolve().unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels(), vec![3]);
    }

    #[test]
    fn presets_resolve() {
        let mut spec = DistributionSpec::default();
        assert_eq!(spec.resolve().unwrap().dim(), 1);
        spec.preset = "four-cluster".into();
        assert_eq!(spec.resolve().unwrap().dim(), 2);
        spec.preset = "nope".into();
        assert!(spec.resolve().is_err());
    }
}
