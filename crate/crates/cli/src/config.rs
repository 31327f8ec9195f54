//! Run configuration files.
//!
//! Configs are TOML. Trajectory runs (`gan-irl`, `gcl`, `maxent-exact`) use
//! the `[world]`, `[cost]`, `[train]` and optional `[fixed_point]` sections;
//! EBM runs (`ebm-gan`, `ebm-ml`) use `[domain]`, `[data]`, `[generator]`,
//! `[energy]`, `[train]` and optional `[ml]` and `[fixed_point]`. A top-level
//! `seed` is overridden by `--seed`.

use std::fmt;
use std::path::Path;

use irlgan_core::cost::{grid_feature_cost, CostModel};
use irlgan_core::ebm::{DataDistribution, DataSpec, DiscreteDomain, EbmConfig, GeneratorKind, MlTarget};
use irlgan_core::gcl::{BiasMode, ExpectationMode, TrainConfig};
use irlgan_core::mdp::{GridConfig, Mdp};
use irlgan_core::mixture::FixedPointOptions;
use irlgan_core::Error as CoreError;
use serde::{Deserialize, Serialize};

/// A config problem, with the line it was found on when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn at_key(text: &str, key: &str, message: impl Into<String>) -> Self {
        Self {
            line: key_line(text, key),
            message: message.into(),
        }
    }
}

/// 1-based line of the first `key = ...` assignment.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        ConfigError {
            line,
            message: e.message().to_string(),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_true")]
    pub accelerate: bool,
}

fn default_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_damping() -> f64 {
    1.0
}

impl Default for FixedPointSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            accelerate: true,
        }
    }
}

impl FixedPointSection {
    fn options(&self) -> FixedPointOptions {
        FixedPointOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            init_log_z: None,
            accelerate: self.accelerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub start: usize,
    pub horizon: usize,
}

/// Ground-truth and initial cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostSection {
    /// Linear cost on the three built-in grid features.
    GridFeatures {
        goal: usize,
        #[serde(rename = "true")]
        truth: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<Vec<f64>>,
    },
    /// One parameter per (state, action), row-major.
    Tabular {
        #[serde(rename = "true")]
        truth: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryTrainSection {
    pub n_demos: usize,
    pub n_gen_samples: usize,
    pub iterations: usize,
    pub step_size: f64,
    #[serde(default = "default_one")]
    pub disc_steps: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    pub expectations: ExpectationMode,
    pub bias_mode: BiasMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub seed: u64,
    pub world: WorldSection,
    pub cost: CostSection,
    pub train: TrajectoryTrainSection,
    #[serde(default)]
    pub fixed_point: FixedPointSection,
}

impl TrajectoryFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        parse(text)
    }

    pub fn build(&self, text: &str) -> Result<TrainConfig, ConfigError> {
        let w = &self.world;
        let world = GridConfig::new(w.width, w.height, w.start, w.horizon);
        let mdp = Mdp::gridworld(world).map_err(|e| ConfigError::at_key(text, "width", e.to_string()))?;
        let cost_err = |e: CoreError| ConfigError::at_key(text, "kind", e.to_string());
        let (true_cost, init_cost) = match &self.cost {
            CostSection::GridFeatures { goal, truth, init } => {
                let t = grid_feature_cost(&mdp, *goal, truth.clone()).map_err(cost_err)?;
                let i = match init {
                    Some(v) => t.with_params(v.clone()).map_err(cost_err)?,
                    None => t.zeroed(),
                };
                (t, i)
            }
            CostSection::Tabular { truth, init } => {
                let t = CostModel::tabular(mdp.n_states(), mdp.n_actions(), truth.clone()).map_err(cost_err)?;
                let i = match init {
                    Some(v) => t.with_params(v.clone()).map_err(cost_err)?,
                    None => t.zeroed(),
                };
                (t, i)
            }
        };
        let t = &self.train;
        let cfg = TrainConfig {
            world,
            true_cost,
            init_cost,
            n_demos: t.n_demos,
            n_gen_samples: t.n_gen_samples,
            iterations: t.iterations,
            step_size: t.step_size,
            disc_steps: t.disc_steps,
            damping: t.damping,
            seed: self.seed,
            expectations: t.expectations,
            bias_mode: t.bias_mode,
            fixed_point: self.fixed_point.options(),
        };
        cfg.validate().map_err(|e| {
            let key = semantic_key(&e.to_string());
            ConfigError::at_key(text, key, e.to_string())
        })?;
        Ok(cfg)
    }
}

/// Best guess at the key a validation message is about.
fn semantic_key(message: &str) -> &'static str {
    const KEYS: [&str; 12] = [
        "n_gen_samples",
        "n_demos",
        "n_samples",
        "gen_step_size",
        "step_size",
        "damping",
        "iterations",
        "disc_steps",
        "sigma",
        "width",
        "init_logit_scale",
        "start",
    ];
    KEYS.into_iter().find(|k| message.contains(k)).unwrap_or("kind")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub width: usize,
    pub height: usize,
}

/// Data distribution; `table` takes either inline `probs` or a `path` to a
/// one-probability-per-line file (relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    BimodalCorners {
        sigma: f64,
    },
    Ring {
        radius: f64,
        width: f64,
    },
    Uniform,
    Random {
        seed: u64,
    },
    Table {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    #[serde(default)]
    pub init_logit_scale: f64,
    #[serde(default = "default_one")]
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    #[serde(default)]
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbmTrainSection {
    pub iterations: usize,
    pub step_size: f64,
    #[serde(default = "default_one")]
    pub disc_steps: usize,
    pub n_samples: usize,
    pub expectations: ExpectationMode,
    pub bias_mode: BiasMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlSection {
    pub target: MlTarget,
}

impl Default for MlSection {
    fn default() -> Self {
        Self {
            target: MlTarget::Energy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbmFile {
    pub seed: u64,
    pub domain: DomainSection,
    pub data: DataSection,
    pub generator: GeneratorSection,
    #[serde(default)]
    pub energy: EnergySection,
    pub train: EbmTrainSection,
    #[serde(default)]
    pub ml: MlSection,
    #[serde(default)]
    pub fixed_point: FixedPointSection,
}

impl EbmFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        parse(text)
    }

    /// Replaces a file-backed table by its inline probabilities, so the
    /// echoed config is self-contained.
    pub fn inline_table(&mut self, text: &str, base: &Path) -> Result<(), ConfigError> {
        if let DataSection::Table { probs, path } = &mut self.data {
            match (probs.is_some(), path.take()) {
                (true, Some(_)) => {
                    return Err(ConfigError::at_key(text, "path", "give either probs or path, not both"))
                }
                (false, Some(p)) => {
                    let full = base.join(&p);
                    let body = std::fs::read_to_string(&full).map_err(|e| {
                        ConfigError::at_key(text, "path", format!("cannot read {}: {e}", full.display()))
                    })?;
                    let n = self.domain.width * self.domain.height;
                    let table = DataDistribution::parse_table(&body, n)
                        .map_err(|e| ConfigError::at_key(text, "path", format!("{}: {e}", full.display())))?;
                    *probs = Some(table.probs().to_vec());
                }
                (true, None) => {}
                (false, None) => return Err(ConfigError::at_key(text, "kind", "table data needs probs or path")),
            }
        }
        Ok(())
    }

    pub fn build(&self, text: &str) -> Result<EbmConfig, ConfigError> {
        let data = match &self.data {
            DataSection::BimodalCorners { sigma } => DataSpec::BimodalCorners { sigma: *sigma },
            DataSection::Ring { radius, width } => DataSpec::Ring {
                radius: *radius,
                width: *width,
            },
            DataSection::Uniform => DataSpec::Uniform,
            DataSection::Random { seed } => DataSpec::Random { seed: *seed },
            DataSection::Table { probs: Some(p), .. } => DataSpec::Table { probs: p.clone() },
            DataSection::Table { probs: None, .. } => {
                return Err(ConfigError::at_key(text, "kind", "table data needs probs or path"))
            }
        };
        let g = &self.generator;
        let t = &self.train;
        let cfg = EbmConfig {
            domain: DiscreteDomain {
                width: self.domain.width,
                height: self.domain.height,
            },
            data,
            generator: g.kind,
            iterations: t.iterations,
            step_size: t.step_size,
            disc_steps: t.disc_steps,
            gen_steps: g.steps,
            gen_step_size: g.step_size,
            n_samples: t.n_samples,
            damping: g.damping,
            seed: self.seed,
            init_logit_scale: g.init_logit_scale,
            init_energy_scale: self.energy.init_scale,
            expectations: t.expectations,
            bias_mode: t.bias_mode,
            ml_target: self.ml.target,
            fixed_point: self.fixed_point.options(),
        };
        cfg.validate().map_err(|e| {
            let key = semantic_key(&e.to_string());
            ConfigError::at_key(text, key, e.to_string())
        })?;
        Ok(cfg)
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config structs serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
seed = 7

[world]
width = 3
height = 3
horizon = 5

[cost]
kind = "grid-features"
goal = 8
true = [1.0, -1.0, 0.5]

[train]
n_demos = 500
n_gen_samples = 500
iterations = 200
step_size = 0.1
expectations = "empirical"
bias_mode = "joint"
"#;

    #[test]
    fn parses_and_builds() {
        let f = TrajectoryFile::parse(GOOD).unwrap();
        let cfg = f.build(GOOD).unwrap();
        assert_eq!(cfg.iterations, 200);
        assert_eq!(cfg.init_cost.params(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn echo_round_trips() {
        let f = TrajectoryFile::parse(GOOD).unwrap();
        let again = TrajectoryFile::parse(&to_toml(&f)).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let bad = GOOD.replace("step_size = 0.1", "step_size = = 0.1");
        let e = TrajectoryFile::parse(&bad).unwrap_err();
        assert_eq!(e.line, Some(bad.lines().position(|l| l.contains("= =")).unwrap() + 1));
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let bad = GOOD.replace("horizon = 5", "horizon = 5\nhorizn = 4");
        let e = TrajectoryFile::parse(&bad).unwrap_err();
        assert!(e.line.is_some(), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_key() {
        let bad = GOOD.replace("n_gen_samples = 500", "n_gen_samples = 400");
        let e = TrajectoryFile::parse(&bad).unwrap().build(&bad).unwrap_err();
        assert_eq!(e.line, key_line(&bad, "n_gen_samples"));
    }
}
