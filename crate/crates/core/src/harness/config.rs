//! TOML experiment descriptions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adcore::{Activation, MlpSpec};
use crate::amortize::AmortizeConfig;
use crate::energy::{AnalyticTarget, AutoencoderSpec};
use crate::error::{Error, Result};
use crate::harness::data::{IdxTransform, SyntheticSpec};
use crate::steingan::SteinGanConfig;
use crate::svgd::{SvgdConfig, TargetDensity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Svgd,
    Amortize,
    Steingan,
    Check,
}

/// Initial SVGD particles `mean + std·N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleInit {
    pub n: usize,
    pub mean: Vec<f64>,
    #[serde(default = "default_one")]
    pub std: f64,
}

/// Generator layers; input and output widths come from the noise, labels and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_tanh")]
    pub hidden_activation: Activation,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl GeneratorSpec {
    pub fn mlp(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        MlpSpec::new(input_dim, &self.hidden, output_dim).with_activations(self.hidden_activation, Activation::Identity)
    }
}

/// Autoencoder energy, optionally with a classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySpec {
    /// Adds a softmax head over the dataset labels.
    #[serde(default)]
    pub joint: bool,
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_tanh")]
    pub code_activation: Activation,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl EnergySpec {
    pub fn autoencoder(&self, dim: usize) -> AutoencoderSpec {
        AutoencoderSpec {
            dim,
            code_dim: self.code_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            code_activation: self.code_activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        spec: SyntheticSpec,
    },
    /// IDX files; relative paths resolve against the config file's directory.
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        transform: Option<IdxTransform>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Final samples to dump.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Writes samples as a PGM grid of `side × side` tiles instead of CSV.
    #[serde(default)]
    pub image_side: Option<usize>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { samples: default_samples(), image_side: None }
    }
}

/// One experiment. The root `seed` replaces the seeds of the sub-configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub target: Option<AnalyticTarget>,
    #[serde(default)]
    pub particles: Option<ParticleInit>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub energy: Option<EnergySpec>,
    #[serde(default)]
    pub svgd: Option<SvgdConfig>,
    #[serde(default)]
    pub amortize: Option<AmortizeConfig>,
    #[serde(default)]
    pub steingan: Option<SteinGanConfig>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_one() -> f64 {
    1.0
}

fn default_tanh() -> Activation {
    Activation::Tanh
}

fn default_init_std() -> f64 {
    0.3
}

fn default_code_dim() -> usize {
    8
}

fn default_samples() -> usize {
    1000
}

fn require<'a, T>(field: &'a Option<T>, name: &str, mode: Mode) -> Result<&'a T> {
    field.as_ref().ok_or_else(|| Error::Config(format!("mode {mode:?} requires a [{name}] section")))
}

fn forbid<T>(field: &Option<T>, name: &str, mode: Mode) -> Result<()> {
    match field {
        Some(_) => Err(Error::Config(format!("section [{name}] is not used by mode {mode:?}"))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    /// The self-test experiment.
    pub fn check(seed: u64) -> Self {
        Self {
            mode: Mode::Check,
            seed,
            out: None,
            target: None,
            particles: None,
            dataset: None,
            generator: None,
            energy: None,
            svgd: None,
            amortize: None,
            steingan: None,
            output: OutputSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Cross-section checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let mode = self.mode;
        match mode {
            Mode::Svgd => {
                let target = require(&self.target, "target", mode)?;
                let init = require(&self.particles, "particles", mode)?;
                require(&self.svgd, "svgd", mode)?.validate()?;
                check_target(target)?;
                if init.n == 0 || init.mean.len() != target.dim() {
                    return Err(Error::Config(format!(
                        "particles need n >= 1 and a mean of length {}, got n = {} and length {}",
                        target.dim(),
                        init.n,
                        init.mean.len()
                    )));
                }
                if !(init.std >= 0.0 && init.std.is_finite()) {
                    return Err(Error::Config(format!("particle std must be non-negative, got {}", init.std)));
                }
                forbid(&self.dataset, "dataset", mode)?;
                forbid(&self.generator, "generator", mode)?;
                forbid(&self.energy, "energy", mode)?;
                forbid(&self.amortize, "amortize", mode)?;
                forbid(&self.steingan, "steingan", mode)?;
            }
            Mode::Amortize => {
                check_target(require(&self.target, "target", mode)?)?;
                require(&self.amortize, "amortize", mode)?.validate()?;
                check_generator(require(&self.generator, "generator", mode)?)?;
                forbid(&self.particles, "particles", mode)?;
                forbid(&self.dataset, "dataset", mode)?;
                forbid(&self.energy, "energy", mode)?;
                forbid(&self.svgd, "svgd", mode)?;
                forbid(&self.steingan, "steingan", mode)?;
            }
            Mode::Steingan => {
                require(&self.dataset, "dataset", mode)?;
                require(&self.steingan, "steingan", mode)?.validate()?;
                check_generator(require(&self.generator, "generator", mode)?)?;
                let e = require(&self.energy, "energy", mode)?;
                if e.code_dim == 0 || !(e.init_std > 0.0) {
                    return Err(Error::Config("energy code_dim and init_std must be positive".into()));
                }
                forbid(&self.target, "target", mode)?;
                forbid(&self.particles, "particles", mode)?;
                forbid(&self.svgd, "svgd", mode)?;
                forbid(&self.amortize, "amortize", mode)?;
            }
            Mode::Check => {
                forbid(&self.target, "target", mode)?;
                forbid(&self.particles, "particles", mode)?;
                forbid(&self.dataset, "dataset", mode)?;
                forbid(&self.generator, "generator", mode)?;
                forbid(&self.energy, "energy", mode)?;
                forbid(&self.svgd, "svgd", mode)?;
                forbid(&self.amortize, "amortize", mode)?;
                forbid(&self.steingan, "steingan", mode)?;
            }
        }
        if self.output.image_side == Some(0) {
            return Err(Error::Config("output image_side must be positive".into()));
        }
        Ok(())
    }
}

fn check_target(t: &AnalyticTarget) -> Result<()> {
    t.validate().map_err(|e| Error::Config(format!("target: {e}")))
}

fn check_generator(g: &GeneratorSpec) -> Result<()> {
    if !(g.init_std > 0.0 && g.init_std.is_finite()) {
        return Err(Error::Config(format!("generator init_std must be positive, got {}", g.init_std)));
    }
    if g.hidden.contains(&0) {
        return Err(Error::Config("generator hidden widths must be positive".into()));
    }
    Ok(())
}
