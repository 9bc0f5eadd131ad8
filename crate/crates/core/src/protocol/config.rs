//! Run configuration, read from TOML.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationStrategy, LambdaParam};
use crate::datagen::{partition_class_sets, partition_classes, ClientDistribution, ComponentDensity, PartitionScheme};
use crate::error::{Error, Result};
use crate::numcore::{Activation, AdamConfig, LossKind, LossSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub num_clients: usize,
    pub strategy: StrategyConfig,
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub spectral_norm: bool,
    /// Draw a second fake batch for judging instead of reusing the one the
    /// clients trained on.
    #[serde(default)]
    pub fresh_judge_batch: bool,
    #[serde(default)]
    pub lambda: LambdaConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_name() -> String {
    "run".into()
}

fn default_batch_size() -> usize {
    64
}

fn default_loss() -> LossKind {
    LossKind::Mse
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyConfig {
    F2u,
    F2a,
    Mdgan,
    GmanStar,
    Gman0,
    FixedLambda(f64),
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyConfig::F2u => f.write_str("f2u"),
            StrategyConfig::F2a => f.write_str("f2a"),
            StrategyConfig::Mdgan => f.write_str("mdgan"),
            StrategyConfig::GmanStar => f.write_str("gman_star"),
            StrategyConfig::Gman0 => f.write_str("gman0"),
            StrategyConfig::FixedLambda(l) => write!(f, "fixed_lambda({l})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    /// Initial value of the pre-ReLU parameter.
    pub init: f64,
    pub beta: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig { init: 0.1, beta: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Multiplies the output layer's initial weights, widening the initial
    /// sample spread.
    pub output_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 16,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            output_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Overrides the shared `[optimizer]` for the discriminators.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamConfig>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: vec![64, 64],
            activation: Activation::LeakyRelu(0.2),
            optimizer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub partition: PartitionScheme,
    pub classes: Vec<ClassConfig>,
    /// Pin each client to a finite sample buffer of this size instead of
    /// drawing fresh real data every step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_size: Option<usize>,
}

/// One class density: `mean` with either an isotropic `std` or a 2x2 `cov`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<[[f64; 2]; 2]>,
}

impl ClassConfig {
    pub fn density(&self) -> Result<ComponentDensity> {
        match (self.mean.as_slice(), self.std, self.cov) {
            (&[m], Some(s), None) => ComponentDensity::gaussian1d(m, s),
            (&[a, b], Some(s), None) => ComponentDensity::gaussian2d([a, b], [[s * s, 0.0], [0.0, s * s]]),
            (&[a, b], None, Some(cov)) => ComponentDensity::gaussian2d([a, b], cov),
            _ => Err(Error::Config(
                "a class needs a 1-d mean with `std`, or a 2-d mean with `std` or `cov`".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Metric cadence in iterations.
    pub every: usize,
    pub eval_samples: usize,
    pub mode_radius: f64,
    pub coverage_threshold: f64,
    /// Points per axis of the histogram grid (default 256 in 1-d, 48 in 2-d).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Points per axis for the normalizer quadrature (default 4096 / 256).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_grid_points: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            every: 100,
            eval_samples: 10_000,
            mode_radius: 1.0,
            coverage_threshold: 0.1,
            grid_points: None,
            z_grid_points: None,
        }
    }
}

impl MetricsConfig {
    pub fn grid_points_for(&self, dim: usize) -> usize {
        self.grid_points.unwrap_or(if dim == 1 { 256 } else { 48 })
    }

    pub fn z_grid_points_for(&self, dim: usize) -> usize {
        self.z_grid_points.unwrap_or(if dim == 1 { 4096 } else { 256 })
    }
}

/// Axis values for `sweep`. Empty lists fall back to the defaults below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<StrategyConfig>,
    pub lambda_fixed: Vec<f64>,
    pub num_clients: Vec<usize>,
    pub overlap: Vec<PartitionScheme>,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn strategies_or_default(&self) -> Vec<StrategyConfig> {
        if self.strategies.is_empty() {
            vec![StrategyConfig::F2u, StrategyConfig::F2a, StrategyConfig::Mdgan, StrategyConfig::Gman0]
        } else {
            self.strategies.clone()
        }
    }

    pub fn lambda_fixed_or_default(&self) -> Vec<f64> {
        if self.lambda_fixed.is_empty() {
            vec![0.0, 3.6]
        } else {
            self.lambda_fixed.clone()
        }
    }

    pub fn num_clients_or_default(&self) -> Vec<usize> {
        if self.num_clients.is_empty() {
            vec![5, 10, 20]
        } else {
            self.num_clients.clone()
        }
    }

    pub fn overlap_or_default(&self) -> Vec<PartitionScheme> {
        if self.overlap.is_empty() {
            vec![
                PartitionScheme::NonOverlapping,
                PartitionScheme::ModeratelyOverlapping,
                PartitionScheme::FullyOverlapping,
            ]
        } else {
            self.overlap.clone()
        }
    }
}

/// A configuration problem, located in the source text when possible.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    /// 1-based.
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: ")?,
            (Some(l), None) => write!(f, "line {l}: ")?,
            _ => {}
        }
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

struct Issue {
    key: &'static str,
    message: String,
}

fn issue(key: &'static str, message: impl Into<String>) -> Issue {
    Issue {
        key,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(src: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => {
                    let (l, c) = line_col(src, span.start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            ConfigError {
                line,
                column,
                key: None,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.check().map_err(|i| ConfigError {
            line: locate_key(src, i.key),
            column: None,
            key: Some(i.key.to_string()),
            message: i.message,
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> std::result::Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            column: None,
            key: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        RunConfig::from_toml_str(&src)
    }

    /// Canonical text form; the manifest hash is taken over this.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|i| Error::Config(format!("{}: {}", i.key, i.message)))
    }

    fn check(&self) -> std::result::Result<(), Issue> {
        if self.num_clients == 0 {
            return Err(issue("num_clients", "need at least one client"));
        }
        if self.batch_size == 0 {
            return Err(issue("batch_size", "must be at least 1"));
        }
        if let StrategyConfig::FixedLambda(l) = self.strategy {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(issue("strategy", format!("fixed lambda must be finite and >= 0, got {l}")));
            }
        }
        LambdaParam::new(self.lambda.init, self.lambda.beta).map_err(|e| issue("lambda", e.to_string()))?;
        self.optimizer.validate().map_err(|e| issue("optimizer", e.to_string()))?;
        if let Some(o) = &self.discriminator.optimizer {
            o.validate().map_err(|e| issue("optimizer", e.to_string()))?;
        }
        if self.generator.noise_dim == 0 {
            return Err(issue("noise_dim", "must be at least 1"));
        }
        if !(self.generator.output_scale > 0.0) || !self.generator.output_scale.is_finite() {
            return Err(issue("output_scale", "must be positive and finite"));
        }
        if self.generator.hidden.contains(&0) || self.discriminator.hidden.contains(&0) {
            return Err(issue("hidden", "layer widths must be positive"));
        }
        self.generator.activation.validate().map_err(|e| issue("activation", e.to_string()))?;
        self.discriminator.activation.validate().map_err(|e| issue("activation", e.to_string()))?;

        let s = &self.scenario;
        if s.classes.is_empty() {
            return Err(issue("classes", "scenario needs at least one class"));
        }
        let mut dim = None;
        for c in &s.classes {
            let d = c.density().map_err(|e| issue("classes", e.to_string()))?;
            if *dim.get_or_insert(d.dim()) != d.dim() {
                return Err(issue("classes", "all classes must share one dimension"));
            }
        }
        partition_class_sets(s.classes.len(), self.num_clients, s.partition)
            .map_err(|e| issue("partition", e.to_string()))?;
        if s.buffer_size == Some(0) {
            return Err(issue("buffer_size", "must be at least 1"));
        }

        let m = &self.metrics;
        if m.every == 0 {
            return Err(issue("every", "metric cadence must be at least 1"));
        }
        if m.eval_samples < crate::analysis::MIN_EMPIRICAL_SAMPLES {
            return Err(issue(
                "eval_samples",
                format!("need at least {} samples", crate::analysis::MIN_EMPIRICAL_SAMPLES),
            ));
        }
        if !(m.mode_radius > 0.0) {
            return Err(issue("mode_radius", "must be positive"));
        }
        if !(0.0..=1.0).contains(&m.coverage_threshold) {
            return Err(issue("coverage_threshold", "must lie in [0, 1]"));
        }
        if m.grid_points.is_some_and(|g| g < 16) || m.z_grid_points.is_some_and(|g| g < 16) {
            return Err(issue("grid_points", "grids need at least 16 points per axis"));
        }
        Ok(())
    }

    pub fn class_densities(&self) -> Result<Vec<ComponentDensity>> {
        self.scenario.classes.iter().map(ClassConfig::density).collect()
    }

    pub fn client_distributions(&self) -> Result<Vec<ClientDistribution>> {
        partition_classes(self.num_clients, self.scenario.partition, &self.class_densities()?)
    }

    pub fn data_dim(&self) -> usize {
        self.scenario.classes.first().map_or(0, |c| c.mean.len())
    }

    pub fn aggregation(&self) -> Result<AggregationStrategy> {
        let param = || LambdaParam::new(self.lambda.init, self.lambda.beta);
        Ok(match self.strategy {
            StrategyConfig::F2u => AggregationStrategy::F2u,
            StrategyConfig::F2a => AggregationStrategy::F2a(param()?),
            StrategyConfig::Mdgan => AggregationStrategy::MdGan,
            StrategyConfig::GmanStar => AggregationStrategy::GmanStar(param()?),
            StrategyConfig::Gman0 => AggregationStrategy::Gman0,
            StrategyConfig::FixedLambda(l) => AggregationStrategy::FixedLambda(l),
        })
    }

    pub fn discriminator_optimizer(&self) -> AdamConfig {
        self.discriminator.optimizer.unwrap_or(self.optimizer)
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::for_kind(self.loss)
    }

    /// Generator layer stack; the head is linear.
    pub fn generator_layers(&self) -> Vec<(usize, Activation)> {
        let g = &self.generator;
        let mut layers: Vec<_> = g.hidden.iter().map(|&w| (w, g.activation)).collect();
        layers.push((self.data_dim(), Activation::Linear));
        layers
    }

    /// Discriminator layer stack; the head is linear for least squares and
    /// sigmoid for cross entropy.
    pub fn discriminator_layers(&self) -> Vec<(usize, Activation)> {
        let d = &self.discriminator;
        let mut layers: Vec<_> = d.hidden.iter().map(|&w| (w, d.activation)).collect();
        let head = match self.loss {
            LossKind::Mse => Activation::Linear,
            LossKind::Bce => Activation::Sigmoid,
        };
        layers.push((1, head));
        layers
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// First line assigning `key` (bare or as a table header), 1-based.
fn locate_key(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        let assigns = t
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='));
        let header = t.starts_with('[') && t.trim_matches(|c| c == '[' || c == ']').trim().ends_with(key);
        assigns || header
    })
    .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
num_clients = 3
strategy = "f2a"
iterations = 10

[scenario]
partition = "non_overlapping"
classes = [
  { mean = [-4.0], std = 0.5 },
  { mean = [0.0], std = 0.5 },
  { mean = [4.0], std = 0.5 },
]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lambda, LambdaConfig { init: 0.1, beta: 0.1 });
        assert_eq!(c.optimizer, AdamConfig::default());
        assert_eq!(c.metrics.every, 100);
        assert!(!c.spectral_norm);
        assert_eq!(c.client_distributions().unwrap().len(), 3);
        assert!(matches!(c.aggregation().unwrap(), AggregationStrategy::F2a(_)));
        assert_eq!(c.generator_layers().last().unwrap().0, 1);
    }

    #[test]
    fn canonical_form_round_trips() {
        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.strategy = StrategyConfig::FixedLambda(3.6);
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn fixed_lambda_inline_table() {
        let src = MINIMAL.replace(r#"strategy = "f2a""#, "strategy = { fixed_lambda = 3.6 }");
        let c = RunConfig::from_toml_str(&src).unwrap();
        assert_eq!(c.strategy, StrategyConfig::FixedLambda(3.6));
        assert_eq!(c.strategy.to_string(), "fixed_lambda(3.6)");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let src = MINIMAL.replace("iterations = 10", "iterations = ten");
        let e = RunConfig::from_toml_str(&src).unwrap_err();
        assert_eq!(e.line, Some(4));
        assert!(e.column.is_some());
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let src = MINIMAL.replace("iterations = 10", "iterations = 10\nbatch_size = 0");
        let e = RunConfig::from_toml_str(&src).unwrap_err();
        assert_eq!(e.line, Some(5));
        assert_eq!(e.key.as_deref(), Some("batch_size"));

        let src = MINIMAL.replace("num_clients = 3", "num_clients = 2");
        let e = RunConfig::from_toml_str(&src).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("partition"));
        assert_eq!(e.line, Some(7));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = MINIMAL.replace("iterations = 10", "iterations = 10\nbatchsize = 3");
        let e = RunConfig::from_toml_str(&src).unwrap_err();
        assert_eq!(e.line, Some(5));
    }

    #[test]
    fn class_shapes() {
        let c = ClassConfig { mean: vec![0.0, 1.0], std: Some(0.5), cov: None };
        assert_eq!(c.density().unwrap().dim(), 2);
        let c = ClassConfig { mean: vec![0.0], std: None, cov: None };
        assert!(c.density().is_err());
        let c = ClassConfig { mean: vec![0.0, 0.0], std: None, cov: Some([[1.0, 2.0], [2.0, 1.0]]) };
        assert!(c.density().is_err());
    }
}
