//! Run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::nn::MlpSpec;
use crate::train::{PhaseSchedule, TrainSettings};

pub const SEED_ENV: &str = "LATENTDYN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub dt: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 512, t: 96, dt: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetsConfig {
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub latent: MlpSpec,
}

impl Default for NetsConfig {
    fn default() -> Self {
        NetsConfig {
            encoder: MlpSpec::encoder(),
            decoder: MlpSpec::decoder(),
            latent: MlpSpec::latent(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub refine_tol: f64,
    pub lp_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 720,
            refine_tol: 1e-7,
            lp_p: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(rename = "T_horizon")]
    pub t_horizon: f64,
    /// Reference-flow RK4 steps per unit time.
    pub substeps: usize,
    #[serde(rename = "N_iterations")]
    pub n_iterations: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            t_horizon: 10.0,
            substeps: 1000,
            n_iterations: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub nets: NetsConfig,
    pub schedule: PhaseSchedule,
    pub batch_size: usize,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            nets: NetsConfig::default(),
            schedule: PhaseSchedule::default(),
            batch_size: 4096,
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("{name} must be positive and finite, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::validation(format!("{name} must be at least {min}, got {v}")))
    }
}

fn io_shape(name: &str, spec: &MlpSpec, input: usize, output: usize) -> Result<()> {
    spec.validate()?;
    if spec.input_dim() != input || spec.output_dim() != output {
        return Err(Error::validation(format!(
            "{name} must map R^{input} -> R^{output}, got dims {:?}",
            spec.dims()
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        at_least("data.N", self.data.n, 1)?;
        at_least("data.T", self.data.t, 2)?;
        positive("data.dt", self.data.dt)?;
        io_shape("encoder", &self.nets.encoder, 2, 1)?;
        io_shape("decoder", &self.nets.decoder, 1, 2)?;
        io_shape("latent field", &self.nets.latent, 1, 1)?;
        self.schedule.validate()?;
        at_least("batch_size", self.batch_size, 1)?;
        at_least("eval.K", self.eval.k, 16)?;
        positive("eval.refine_tol", self.eval.refine_tol)?;
        positive("eval.lp_p", self.eval.lp_p)?;
        positive("theory.T_horizon", self.theory.t_horizon)?;
        at_least("theory.substeps", self.theory.substeps, 1)?;
        at_least("theory.N_iterations", self.theory.n_iterations, 1)
    }

    /// Seed precedence: explicit flag, then the environment, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        let env = std::env::var(SEED_ENV).ok();
        self.seed = resolve_seed(flag, env.as_deref(), self.seed)?;
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            schedule: self.schedule.clone(),
            batch_size: self.batch_size,
            ..TrainSettings::default()
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            k: self.eval.k,
            refine_tol: self.eval.refine_tol,
            lp_p: self.eval.lp_p,
            steps: self.data.t,
            dt: self.data.dt,
        }
    }
}

pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(text) => text
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("{SEED_ENV}={text:?} is not a 64-bit unsigned seed"))),
        None => Ok(config),
    }
}
