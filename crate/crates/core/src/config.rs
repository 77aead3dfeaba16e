//! Experiment configuration files.
//!
//! A configuration is a single versioned TOML document. Relative paths are
//! resolved against the directory that holds the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_gen::{DiscParams, RampParams};
use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, Kernel};
use crate::grid::Grid;
use crate::joint::{GammaContinuation, InnerSettings, JointConfig, JointInit};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Joint solve with `K = I` on noisy data.
    DenoiseJoint,
    NoiseSweep,
    ComparisonTable,
    TemporalInpaint,
    /// Joint solve with the configured operator.
    SingleSolve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneName {
    TranslatingDisc,
    TranslatingRamp,
    WarpedFromFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        scene: SceneName,
        #[serde(default = "default_size")]
        width: usize,
        #[serde(default = "default_size")]
        height: usize,
        #[serde(default = "default_frames")]
        frames: usize,
        #[serde(default)]
        noise_variance: f64,
        #[serde(default)]
        disc: DiscParams,
        #[serde(default)]
        ramp: RampParams,
        /// Base frame and `.flo` file of `warped_from_flow`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        flow: Option<PathBuf>,
    },
    /// Numbered frames on disk, optionally with ground-truth `.flo` files.
    Directory {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ground_truth: Option<PathBuf>,
        /// Noise added after loading.
        #[serde(default)]
        noise_variance: f64,
    },
}

fn default_size() -> usize {
    64
}

fn default_frames() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub eps_main: f64,
    pub eps_u: f64,
    pub eps_v: f64,
    pub max_outer: usize,
    pub max_iters_u: usize,
    pub max_iters_v: usize,
    pub warm_start_duals: bool,
    pub descent_safeguard: bool,
    pub init: JointInit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continuation: Option<GammaContinuation>,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            eps_main: 1e-6,
            eps_u: 1e-6,
            eps_v: 1e-6,
            max_outer: 20,
            max_iters_u: 1000,
            max_iters_v: 1000,
            warm_start_duals: false,
            descent_safeguard: true,
            init: JointInit::Zero,
            continuation: None,
        }
    }
}

impl SolverSection {
    pub fn inner_u(&self) -> InnerSettings {
        InnerSettings {
            max_iters: self.max_iters_u,
            eps: self.eps_u,
        }
    }

    pub fn inner_v(&self) -> InnerSettings {
        InnerSettings {
            max_iters: self.max_iters_v,
            eps: self.eps_v,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    #[default]
    Identity,
    GaussianBlur {
        sigma: f64,
    },
    BoxBlur {
        size: usize,
    },
    Subsample {
        factor: usize,
    },
}

impl OperatorSpec {
    pub fn build(&self, grid: Grid) -> Result<ForwardOperator> {
        match *self {
            OperatorSpec::Identity => ForwardOperator::identity(grid),
            OperatorSpec::GaussianBlur { sigma } => {
                ForwardOperator::blur(grid, Kernel::gaussian(sigma)?)
            }
            OperatorSpec::BoxBlur { size } => ForwardOperator::blur(grid, Kernel::boxed(size)?),
            OperatorSpec::Subsample { factor } => ForwardOperator::subsample(grid, factor),
        }
    }
}

/// Weight grids and noise levels swept by the table and sweep experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            alpha: vec![0.01, 0.03, 0.05],
            beta: vec![0.05, 0.1],
            variances: vec![0.0, 0.01, 0.02, 0.03],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintSection {
    /// Unknown frames inserted between consecutive known frames.
    pub inserted: usize,
}

impl Default for InpaintSection {
    fn default() -> Self {
        InpaintSection { inserted: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataSpec,
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub operator: OperatorSpec,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub inpaint: InpaintSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Reads and validates a configuration file, resolving relative paths
    /// against its directory and checking that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        match &mut self.data {
            DataSpec::Synthetic { base: b, flow, .. } => {
                b.iter_mut().for_each(fix);
                flow.iter_mut().for_each(fix);
            }
            DataSpec::Directory {
                path, ground_truth, ..
            } => {
                fix(path);
                ground_truth.iter_mut().for_each(fix);
            }
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut inputs: Vec<&PathBuf> = Vec::new();
        match &self.data {
            DataSpec::Synthetic {
                scene, base, flow, ..
            } => {
                if *scene == SceneName::WarpedFromFlow {
                    match (base, flow) {
                        (Some(b), Some(f)) => inputs.extend([b, f]),
                        _ => {
                            return Err(Error::config(
                                "warped_from_flow needs data.base and data.flow",
                            ))
                        }
                    }
                }
            }
            DataSpec::Directory {
                path, ground_truth, ..
            } => {
                inputs.push(path);
                inputs.extend(ground_truth);
            }
        }
        for p in inputs {
            if !p.exists() {
                return Err(Error::config(format!(
                    "input {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn validate_values(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported configuration version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let m = &self.model;
        if !(m.alpha >= 0.0) || !(m.beta > 0.0) || !(m.gamma > 0.0) {
            return Err(Error::config("model needs alpha >= 0, beta > 0, gamma > 0"));
        }
        let s = &self.sweep;
        if s.alpha.iter().any(|a| !(*a >= 0.0)) || s.beta.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::config(
                "sweep weights must be alpha >= 0 and beta > 0",
            ));
        }
        if s.variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("sweep variances must be >= 0"));
        }
        let noise = match self.data {
            DataSpec::Synthetic { noise_variance, .. }
            | DataSpec::Directory { noise_variance, .. } => noise_variance,
        };
        if !(noise >= 0.0) {
            return Err(Error::config("noise_variance must be >= 0"));
        }
        Ok(())
    }

    /// Joint solver configuration for the given operator and weights.
    pub fn joint_config(&self, k: ForwardOperator, alpha: f64, beta: f64) -> JointConfig {
        let mut c = JointConfig::new(k, alpha, beta, self.model.gamma);
        let s = &self.solver;
        c.eps_main = s.eps_main;
        c.max_outer = s.max_outer;
        c.inner_u = s.inner_u();
        c.inner_v = s.inner_v();
        c.warm_start_duals = s.warm_start_duals;
        c.descent_safeguard = s.descent_safeguard;
        c.init = s.init;
        c.continuation = s.continuation;
        c
    }
}
