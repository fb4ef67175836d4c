//! JSON run configuration and its translation into models, pools and sampler settings.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builtin::{builtin_discrete_chain, builtin_gaussian_chain, BuiltinModel, DiscreteChainParams, GaussianChainParams};
use crate::chain::Support;
use crate::error::{MeldError, Result};
use crate::normal_approx::ApproxMode;
use crate::pooling::{BoundaryChoice, FactorizationMode, PoolMethod, PooledPrior, RestPooling, SequentialMode};
use crate::samplers::{ChainSchedule, MHKernelConfig, StageSettings};

/// Smallest admissible iteration count for any stage.
pub const MIN_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pooling: PoolingConfig,
    pub sampler: Option<SamplerConfig>,
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub outputs: OutputConfig,
}

/// Either a built-in chain (`builtin` plus `params`) or a model registered
/// through the library under `external`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub builtin: Option<String>,
    #[serde(default)]
    pub params: serde_json::Value,
    pub external: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoolingConfig {
    Logarithmic { lambda: Vec<f64> },
    Poe,
    Linear { lambda: Vec<[f64; 2]> },
    /// `authority` counts submodels from 1.
    DictatorialPartial { authority: usize, rest: RestConfig },
    DictatorialComplete { choices: Vec<Choice> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RestConfig {
    Logarithmic { lambda: Vec<f64> },
    Linear { lambda: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Choice {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Parallel,
    ParallelUnitwise,
    Sequential,
    NormalApprox,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Parallel => "parallel",
            SamplerKind::ParallelUnitwise => "parallel-unitwise",
            SamplerKind::Sequential => "sequential",
            SamplerKind::NormalApprox => "normal-approx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorizationConfig {
    FlatEnds,
    SubpriorEnds,
    Flat,
    SubpriorChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproxModeConfig {
    Ratio,
    PoeFlatPrior,
}

/// Per-coordinate random-walk scales for each kernel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalesConfig {
    pub stage_one_first: Option<Vec<f64>>,
    pub stage_one_last: Option<Vec<f64>>,
    pub stage_two: Option<Vec<f64>>,
    pub stage_three: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Iterations per chain of the final stage, warmup included.
    pub iterations: usize,
    /// Iterations per chain of earlier stages; defaults to `iterations`.
    pub stage_one_iterations: Option<usize>,
    /// Warmup per chain; defaults to 10% of the iterations.
    pub warmup: Option<usize>,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "four")]
    pub chains: usize,
    pub stage_one_chains: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub scales: ScalesConfig,
    pub factorization: Option<FactorizationConfig>,
    pub approx_mode: Option<ApproxModeConfig>,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
    /// Logarithmic weights `(l, 1 - 2l, l)` to grid in addition to the configured pool.
    pub lambda1_sweep: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

fn config_error(path: &str, msg: impl std::fmt::Display) -> MeldError {
    MeldError::Configuration(format!("at `{path}`: {msg}"))
}

fn parse_at<T: serde::de::DeserializeOwned>(value: &serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { prefix.to_string() } else { format!("{prefix}.{inner}") };
        config_error(&path, e.inner())
    })
}

impl RunConfig {
    /// Parses a JSON document; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| config_error(&e.path().to_string(), e.inner()))?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MeldError::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form of this configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn sampler(&self) -> Result<&SamplerConfig> {
        self.sampler.as_ref().ok_or_else(|| config_error("sampler", "this command needs a sampler section"))
    }

    /// Checks everything that does not require building the model.
    pub fn validate(&self) -> Result<()> {
        match (&self.model.builtin, &self.model.external) {
            (Some(_), Some(_)) => return Err(config_error("model", "give either `builtin` or `external`, not both")),
            (None, None) => return Err(config_error("model", "one of `builtin` or `external` is required")),
            _ => {}
        }
        if let Some(s) = &self.sampler {
            s.validate()?;
        }
        if let Some(g) = &self.grid {
            if g.upper.partial_cmp(&g.lower) != Some(std::cmp::Ordering::Greater) || g.points < 2 {
                return Err(config_error("grid", "need upper > lower and at least 2 points"));
            }
            if let Some(sweep) = &g.lambda1_sweep {
                if sweep.iter().any(|l| !(0.0..=0.5).contains(l)) {
                    return Err(config_error("grid.lambda1_sweep", "each value must lie in [0, 0.5]"));
                }
            }
        }
        Ok(())
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(config_error("sampler.seed", "a seed is required"));
        }
        if self.iterations < MIN_ITERATIONS {
            return Err(config_error("sampler.iterations", format!("must be at least {MIN_ITERATIONS}")));
        }
        if let Some(n) = self.stage_one_iterations {
            if n < MIN_ITERATIONS {
                return Err(config_error("sampler.stage_one_iterations", format!("must be at least {MIN_ITERATIONS}")));
            }
        }
        if let Some(w) = self.warmup {
            if w >= self.iterations.min(self.stage_one_iterations.unwrap_or(usize::MAX)) {
                return Err(config_error("sampler.warmup", "must be smaller than the iteration counts"));
            }
        }
        if self.thin == 0 {
            return Err(config_error("sampler.thin", "must be at least 1"));
        }
        if self.chains == 0 || self.stage_one_chains == Some(0) {
            return Err(config_error("sampler.chains", "must be at least 1"));
        }
        let f = self.factorization;
        let ok = match self.kind {
            SamplerKind::Parallel | SamplerKind::ParallelUnitwise => {
                matches!(f, None | Some(FactorizationConfig::FlatEnds | FactorizationConfig::SubpriorEnds))
            }
            SamplerKind::Sequential => matches!(f, None | Some(FactorizationConfig::Flat | FactorizationConfig::SubpriorChain)),
            SamplerKind::NormalApprox => f.is_none(),
        };
        if !ok {
            return Err(config_error(
                "sampler.factorization",
                format!("{:?} does not apply to the {} sampler", f, self.kind.name()),
            ));
        }
        Ok(())
    }

    pub fn seed_value(&self) -> u64 {
        self.seed.expect("validated")
    }

    fn schedule(&self, total: usize) -> ChainSchedule {
        let s = match self.warmup {
            Some(w) => ChainSchedule::new(w, total - w),
            None => ChainSchedule::with_default_warmup(total),
        };
        s.thinned(self.thin)
    }

    pub fn final_schedule(&self) -> ChainSchedule {
        self.schedule(self.iterations)
    }

    /// Earlier stages are not thinned.
    pub fn early_schedule(&self) -> ChainSchedule {
        let mut s = self.schedule(self.stage_one_iterations.unwrap_or(self.iterations));
        s.thin = 1;
        s
    }

    pub fn early_chains(&self) -> usize {
        self.stage_one_chains.unwrap_or(self.chains)
    }

    pub fn parallel_mode(&self) -> FactorizationMode {
        match self.factorization {
            Some(FactorizationConfig::FlatEnds) => FactorizationMode::FlatEnds,
            _ => FactorizationMode::SubpriorEnds,
        }
    }

    pub fn sequential_mode(&self) -> SequentialMode {
        match self.factorization {
            Some(FactorizationConfig::Flat) => SequentialMode::Flat,
            _ => SequentialMode::SubpriorChain,
        }
    }

    pub fn approx_mode(&self) -> ApproxMode {
        match self.approx_mode {
            Some(ApproxModeConfig::PoeFlatPrior) => ApproxMode::PoeFlatPrior,
            _ => ApproxMode::Ratio,
        }
    }
}

/// Kernel from configured scales, or the default scales when none are given.
pub fn kernel_for(
    supports: &[Support],
    scales: Option<&Vec<f64>>,
    summary: Option<&crate::gaussian::GaussianDensity>,
    path: &str,
) -> Result<MHKernelConfig> {
    match scales {
        Some(s) => MHKernelConfig::for_supports(supports, s).map_err(|e| config_error(path, e)),
        None => MHKernelConfig::default_for(supports, summary),
    }
}

pub fn stage(kernel: MHKernelConfig, schedule: ChainSchedule, chains: usize) -> StageSettings {
    StageSettings::new(kernel, schedule, chains)
}

impl PoolingConfig {
    /// The pooling method with 0-based submodel indices.
    pub fn method(&self) -> Result<PoolMethod> {
        Ok(match self {
            PoolingConfig::Logarithmic { lambda } => PoolMethod::Logarithmic(lambda.clone()),
            PoolingConfig::Poe => PoolMethod::ProductOfExperts,
            PoolingConfig::Linear { lambda } => PoolMethod::Linear(lambda.clone()),
            PoolingConfig::DictatorialPartial { authority, rest } => {
                if *authority == 0 {
                    return Err(config_error("pooling.authority", "submodels are numbered from 1"));
                }
                PoolMethod::DictatorialPartial {
                    authority: authority - 1,
                    rest: match rest {
                        RestConfig::Logarithmic { lambda } => RestPooling::Logarithmic(lambda.clone()),
                        RestConfig::Linear { lambda } => RestPooling::Linear(lambda.clone()),
                    },
                }
            }
            PoolingConfig::DictatorialComplete { choices } => PoolMethod::DictatorialComplete(
                choices
                    .iter()
                    .map(|c| match c {
                        Choice::Left => BoundaryChoice::Left,
                        Choice::Right => BoundaryChoice::Right,
                    })
                    .collect(),
            ),
        })
    }
}

/// Builds externally registered models by id.
pub type ModelFactory = Box<dyn Fn() -> Result<BuiltinModel> + Send + Sync>;

/// Models supplied through the library API, addressed from config by `model.external`.
#[derive(Default)]
pub struct ModelRegistry {
    entries: Vec<(String, ModelFactory)>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, factory: impl Fn() -> Result<BuiltinModel> + Send + Sync + 'static) {
        self.entries.push((id.into(), Box::new(factory)));
    }

    fn build(&self, id: &str) -> Result<BuiltinModel> {
        let (_, f) = self
            .entries
            .iter()
            .find(|(k, _)| k == id)
            .ok_or_else(|| config_error("model.external", format!("no model registered as `{id}`")))?;
        f()
    }
}

impl ModelConfig {
    pub fn build(&self, registry: &ModelRegistry) -> Result<BuiltinModel> {
        if let Some(id) = &self.external {
            return registry.build(id);
        }
        let params = if self.params.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            self.params.clone()
        };
        match self.builtin.as_deref() {
            Some("gaussian-chain") => builtin_gaussian_chain(&parse_at::<GaussianChainParams>(&params, "model.params")?),
            Some("discrete-chain") => builtin_discrete_chain(&parse_at::<DiscreteChainParams>(&params, "model.params")?),
            Some(other) => Err(config_error(
                "model.builtin",
                format!("unknown builtin `{other}`; expected `gaussian-chain` or `discrete-chain`"),
            )),
            None => Err(config_error("model", "one of `builtin` or `external` is required")),
        }
    }
}

/// Builds the pooled prior of `config` over `built`.
pub fn build_pool(config: &RunConfig, built: &BuiltinModel) -> Result<PooledPrior> {
    built.pool_builder(config.pooling.method()?).build()
}
