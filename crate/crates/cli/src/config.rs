//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use koopman_lyap::koopman::MultistepConfig;
use koopman_lyap::lyapunov::BasisConfig;
use koopman_lyap::neural::TrainConfig;
use koopman_lyap::polytope::Algorithm1Config;
use koopman_lyap::systems::{load_glv_params, GlvParams, Region, VectorField, DEFAULT_DT};
use koopman_lyap::verify::{DomainBox, NlpConfig, SimulationConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Offsets added to the config seed, one per randomness consumer.
pub mod stage {
    pub const SAMPLING: u64 = 1;
    pub const NEURAL: u64 = 2;
    pub const REFINE: u64 = 3;
    pub const NLP: u64 = 4;
    pub const SIMULATION: u64 = 5;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub system: SystemSpec,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub dictionary: DictionaryConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    VanDerPol,
    /// `ẋ = Ax`, rows of `A`.
    Linear { a: Vec<Vec<f64>> },
    /// gLV parameters from a JSON or TOML file with `rho` and `interaction`.
    Glv { file: PathBuf },
    /// Seeded diagonally dominant stable gLV system.
    GlvRandom { n: usize, param_seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub region: Option<Region>,
    /// Ball of this radius around the interior equilibrium (gLV systems),
    /// instead of `region`.
    pub equilibrium_ball: Option<f64>,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_trajectories() -> usize {
    100
}

fn default_steps() -> usize {
    200
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub degree: u32,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig { degree: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Edmd,
    Multistep,
    Neural,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Multi-step horizon `T`.
    pub horizon: usize,
    pub multistep: MultistepConfig,
    /// Encoder widths; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: FitMethod::Edmd,
            horizon: 10,
            multistep: MultistepConfig::default(),
            widths: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Target region `U`; defaults to the sampling region.
    pub region: Option<Region>,
    #[serde(default)]
    pub algorithm1: Algorithm1Config,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Search box; defaults to the data bounding box scaled by `domain_factor`.
    pub domain: Option<DomainBox>,
    pub domain_factor: f64,
    /// Dense grid cross-check for `n ≤ 3`; 0 disables it.
    pub grid_resolution: usize,
    pub nlp: NlpConfig,
    pub simulation: SimulationConfig,
    /// Where simulation starts are drawn; defaults to the target region.
    pub simulation_region: Option<Region>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            domain: None,
            domain_factor: 1.5,
            grid_resolution: 201,
            nlp: NlpConfig::default(),
            simulation: SimulationConfig::default(),
            simulation_region: None,
        }
    }
}

impl PipelineConfig {
    /// Parses and validates `path`. Relative paths inside the file resolve
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let SystemSpec::Glv { file } = &mut cfg.system {
            if file.is_relative() {
                *file = base.join(&*file);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let SystemSpec::Glv { file } = &self.system {
            if !file.is_file() {
                bail!("gLV parameter file {} does not exist", file.display());
            }
        }
        match (&self.sampling.region, self.sampling.equilibrium_ball) {
            (Some(r), None) => r.validate()?,
            (None, Some(r)) if r > 0.0 => {}
            _ => bail!("sampling needs exactly one of `region` or a positive `equilibrium_ball`"),
        }
        if self.sampling.trajectories == 0 || self.sampling.steps == 0 || !(self.sampling.dt > 0.0) {
            bail!("sampling needs trajectories ≥ 1, steps ≥ 1 and dt > 0");
        }
        if let Some(r) = &self.refine.region {
            r.validate()?;
        }
        if self.fit.method == FitMethod::Neural && self.fit.widths.len() < 2 {
            bail!("neural fit needs encoder widths, e.g. widths = [2, 32, 8]");
        }
        if !(self.verify.domain_factor > 0.0) {
            bail!("verify.domain_factor must be positive");
        }
        Ok(())
    }

    /// Vector field and, for gLV systems, the interior equilibrium.
    pub fn system(&self) -> Result<(VectorField, Option<Vec<f64>>)> {
        let glv = |p: GlvParams| -> Result<(VectorField, Option<Vec<f64>>)> { Ok((p.to_field()?, p.interior_equilibrium())) };
        let (field, eq) = match &self.system {
            SystemSpec::VanDerPol => (VectorField::van_der_pol(), None),
            SystemSpec::Linear { a } => {
                let n = a.len();
                if n == 0 || a.iter().any(|r| r.len() != n) {
                    bail!("linear system matrix must be square and nonempty");
                }
                (VectorField::linear(&DMatrix::from_fn(n, n, |i, j| a[i][j]))?, None)
            }
            SystemSpec::Glv { file } => glv(load_glv_params(file)?)?,
            SystemSpec::GlvRandom { n, param_seed } => glv(GlvParams::random_stable(*n, *param_seed)?.0)?,
        };
        Ok((field, eq))
    }

    /// Initial-condition region for sampling.
    pub fn sampling_region(&self, equilibrium: Option<&[f64]>) -> Result<Region> {
        let region = match (&self.sampling.region, self.sampling.equilibrium_ball) {
            (Some(r), _) => r.clone(),
            (None, Some(radius)) => match equilibrium {
                Some(c) => Region::Ball { center: c.to_vec(), radius },
                None => bail!("equilibrium_ball needs a gLV system with an interior equilibrium"),
            },
            (None, None) => bail!("sampling region is missing"),
        };
        region.validate()?;
        Ok(region)
    }

    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }
}
