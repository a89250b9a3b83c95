//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSpec,
    pub instances: InstancesSpec,
    #[serde(default, rename = "instance")]
    pub explicit: Vec<ExplicitInstance>,
    #[serde(default)]
    pub lambda: LambdaSpec,
    #[serde(default)]
    pub bsde: BsdeSpec,
    #[serde(default)]
    pub mc: McSpec,
    #[serde(default)]
    pub girsanov: GirsanovSpec,
    #[serde(default)]
    pub approx: ApproxSpec,
    #[serde(default)]
    pub example: ExampleSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancesSpec {
    /// Number of generated micro instances.
    pub count: usize,
    #[serde(default = "default_generator")]
    pub generator: String,
}

fn default_generator() -> String {
    "micro".into()
}

/// A hand-specified instance; families are looked up in the model registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitInstance {
    pub label: String,
    pub steps: usize,
    #[serde(default = "one")]
    pub horizon: f64,
    /// `none`, `binary` or `trinomial`.
    pub w_lattice: String,
    pub b_lattice: String,
    pub atom_weights: Vec<f64>,
    #[serde(default = "one_usize")]
    pub dim: usize,
    /// `dim` values per root atom.
    pub xi: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub coefficients: FamilyRef,
    pub reward: FamilyRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyRef {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSpec {
    /// Two `κ` constructions; the second is used for the `λ` check.
    pub kinds: Vec<String>,
    pub per_mark: f64,
}

impl Default for LambdaSpec {
    fn default() -> Self {
        Self {
            kinds: vec!["uniform-new".into(), "uniform-full".into()],
            per_mark: 1e6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSpec {
    pub levels: Vec<f64>,
    /// Levels at which the representation over the intensity grid is checked.
    pub representation_levels: Vec<f64>,
}

impl Default for BsdeSpec {
    fn default() -> Self {
        Self {
            levels: (0..=8).map(|i| 2f64.powi(i)).collect(),
            representation_levels: vec![1.0, 16.0, 256.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub particles: usize,
    pub reps: usize,
    /// `λ` mass per mark for the tilted sampler; moderate so that events are
    /// cheap to simulate.
    pub lambda_per_mark: f64,
    /// Penalty levels of the pilot solves behind the bang-bang members.
    pub pilot_levels: Vec<f64>,
    pub pilot_floor: f64,
    /// Fixed controls per instance in the tree/particle consistency check.
    pub consistency_controls: usize,
    pub consistency_particles: usize,
    pub consistency_reps: usize,
}

impl Default for McSpec {
    fn default() -> Self {
        Self {
            particles: 1000,
            reps: 64,
            lambda_per_mark: 0.5,
            pilot_levels: vec![10.0, 100.0],
            pilot_floor: 0.01,
            consistency_controls: 3,
            consistency_particles: 10_000,
            consistency_reps: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GirsanovSpec {
    pub paths: usize,
    pub floor: f64,
    pub ceiling: f64,
    pub lambda_per_mark: f64,
    /// Number of standard errors allowed between the sample mean and 1.
    pub se_multiple: f64,
}

impl Default for GirsanovSpec {
    fn default() -> Self {
        Self {
            paths: 100_000,
            floor: 0.1,
            ceiling: 10.0,
            lambda_per_mark: 1e-3,
            se_multiple: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSpec {
    pub controls: usize,
    pub deltas: Vec<f64>,
    pub reps: usize,
    pub floor: f64,
    pub ceiling: f64,
    pub lambda_per_mark: f64,
    /// One-sided normal quantile in `mean + z·SE < δ`.
    pub z: f64,
}

impl Default for ApproxSpec {
    fn default() -> Self {
        Self {
            controls: 10,
            deltas: vec![0.2, 0.1],
            reps: 10_000,
            floor: 1e-3,
            ceiling: 1e9,
            lambda_per_mark: 1e-2,
            z: 1.645,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSpec {
    pub steps: usize,
}

impl Default for ExampleSpec {
    fn default() -> Self {
        Self { steps: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub equivalence: f64,
    pub monotonicity: f64,
    pub bellman_gap: f64,
    pub girsanov_exact: f64,
    pub dpp: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub law_invariance: f64,
    pub isometry: f64,
    pub intro_gap: f64,
    pub restart: f64,
    pub representation: f64,
    pub restriction: f64,
    pub mc_se: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            equivalence: 1e-8,
            monotonicity: 1e-12,
            bellman_gap: 1e-6,
            girsanov_exact: 1e-10,
            dpp: 1e-6,
            alpha: 1e-8,
            lambda: 1e-8,
            law_invariance: 1e-10,
            isometry: 1e-12,
            intro_gap: 0.1,
            restart: 1e-8,
            representation: 1e-9,
            restriction: 1e-8,
            mc_se: 3.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let message = e.inner().message().to_string();
            let mut path = e.path().to_string();
            // A missing key is reported at its parent; name the key itself.
            if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.strip_suffix('`')) {
                path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
            }
            CliError::Config { path, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, message: &str| {
            Err(CliError::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.instances.generator != "micro" {
            return bad("instances.generator", "only `micro` is available");
        }
        if self.instances.count + self.explicit.len() == 0 {
            return bad("instances.count", "no instances");
        }
        if self.lambda.kinds.len() != 2 {
            return bad("lambda.kinds", "need exactly two κ constructions");
        }
        if !(self.lambda.per_mark > 0.0) {
            return bad("lambda.per_mark", "must be positive");
        }
        if self.bsde.levels.is_empty() || self.bsde.levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("bsde.levels", "must be non-empty and increasing");
        }
        if self.mc.reps < 2 || self.mc.consistency_reps < 2 {
            return bad("mc.reps", "need at least two replications");
        }
        if !(self.girsanov.floor > 0.0 && self.girsanov.floor <= self.girsanov.ceiling) {
            return bad("girsanov.floor", "need 0 < floor ≤ ceiling");
        }
        if self.approx.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return bad("approx.deltas", "every δ must lie in (0, 1)");
        }
        if self.example.steps < 100 {
            return bad("example.steps", "need at least 100 grid cells");
        }
        Ok(())
    }
}
