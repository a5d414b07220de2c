//! Run configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use fprior::anticipation::DivergenceSpec;
use fprior::estimators::gp::SquaredExponential;
use fprior::estimators::plm::{PolynomialBasis, ZSamplerSpec};
use fprior::promptloop::{GeneratorSpec, LearningRateSchedule};
use fprior::serde_ext::extended_f64;
use fprior::{LikelihoodSpec, PriorSpec};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub prior: Option<PriorSpec>,
    pub likelihood: Option<LikelihoodSpec>,
    pub generator: Option<GeneratorSpec>,
    pub divergence: Option<DivergenceSpec>,
    #[serde(rename = "loop")]
    pub loop_: Option<LoopSection>,
    pub lambda: Option<LambdaSection>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    pub anticipation: Option<AnticipationSection>,
    pub bfr: Option<BfrSection>,
    pub plm: Option<PlmSection>,
    pub gp: Option<GpSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnticipationSection {
    pub n_datasets: usize,
    pub n_obs: usize,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub q0: Vec<f64>,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LearningRateSchedule,
    pub fd_step: f64,
    #[serde(with = "extended_f64")]
    pub tau: f64,
    #[serde(with = "extended_f64")]
    pub epsilon: f64,
    pub t_max: usize,
    pub n_obs_per_draw: usize,
    #[serde(default = "default_true")]
    pub common_random_numbers: bool,
    #[serde(default)]
    pub fixed_draw_seed: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSection {
    Fixed {
        value: f64,
    },
    Ess {
        target_ess: f64,
    },
    Calibrated {
        #[serde(default = "default_lambda_max")]
        lambda_max: f64,
    },
}

fn default_lambda_max() -> f64 {
    fprior::calibration::DEFAULT_LAMBDA_MAX
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<PathBuf>,
    pub real: Option<PathBuf>,
    /// Replaces the anticipated sample in `engineer` (prompt calibration
    /// against observed data).
    pub anticipated: Option<PathBuf>,
    pub choices: Option<PathBuf>,
    pub plm: Option<PathBuf>,
    pub gp_synthetic: Option<PathBuf>,
    pub gp_real: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Number of evaluation points for density dumps.
    pub density_points: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BfrSection {
    /// One prompt per basis element; ignored when `basis` is given.
    #[serde(default)]
    pub prompts: Vec<Vec<f64>>,
    #[serde(default)]
    pub n_obs: Option<usize>,
    /// Known basis coefficients, skipping the first stage.
    #[serde(default)]
    pub basis: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub extra_basis: Vec<Vec<f64>>,
    #[serde(default)]
    pub use_shares: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlmSection {
    pub z_sampler: ZSamplerSpec,
    pub mc_draws: usize,
    #[serde(default)]
    pub basis: Option<PolynomialBasis>,
    #[serde(default)]
    pub penalty: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    pub kernel: SquaredExponential,
    pub noise_variance: f64,
    pub n_s_used: Option<usize>,
    pub query: QuerySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum QuerySection {
    Points(Vec<Vec<f64>>),
    Grid { lower: f64, upper: f64, n: usize },
}

impl QuerySection {
    pub fn points(&self) -> Result<Vec<Vec<f64>>, CliError> {
        match self {
            QuerySection::Points(p) => Ok(p.clone()),
            QuerySection::Grid { lower, upper, n } => {
                if *n < 2 || !(upper > lower) {
                    return Err(CliError::Config("query grid needs n >= 2 and upper > lower".into()));
                }
                Ok((0..*n)
                    .map(|i| vec![lower + (upper - lower) * i as f64 / (*n - 1) as f64])
                    .collect())
            }
        }
    }
}

/// A parsed configuration plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub digest: String,
    pub raw: Vec<u8>,
    pub base_dir: PathBuf,
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let raw = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_slice(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig {
        digest: digest_bytes(&raw),
        config,
        raw,
        base_dir,
    })
}

impl LoadedConfig {
    /// Resolves a data path relative to the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    section
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("missing `{name}` section")))
}
