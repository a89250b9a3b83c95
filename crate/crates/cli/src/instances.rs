//! Instances named by a config.

use mfcrand::controls::ActionSet;
use mfcrand::model::{Dims, FamilySpec, InitialCondition, ModelRegistry};
use mfcrand::scenario::{AtomSpace, NoiseLattice, ScenarioTree, TimeGrid};
use mfcrand::value::{micro_instance, micro_shape, Instance, InstanceDescriptor};

use crate::config::{ExperimentConfig, ExplicitInstance};
use crate::error::CliError;

/// Generated micro instances first, then the explicit ones in file order.
pub fn build_instances(cfg: &ExperimentConfig, registry: &ModelRegistry) -> Result<Vec<Instance>, CliError> {
    let mut out = Vec::new();
    for i in 0..cfg.instances.count as u64 {
        out.push(micro_instance(cfg.run.seed, i, micro_shape(i))?);
    }
    for (i, spec) in cfg.explicit.iter().enumerate() {
        out.push(explicit_instance(spec, registry).map_err(|e| match e {
            CliError::Config { path, message } => CliError::Config {
                path: format!("instance[{i}].{path}"),
                message,
            },
            other => other,
        })?);
    }
    Ok(out)
}

fn lattice(name: &str, dim: usize, key: &str) -> Result<NoiseLattice, CliError> {
    match name {
        "none" => Ok(NoiseLattice::none()),
        "binary" => Ok(NoiseLattice::binary(dim)),
        "trinomial" => Ok(NoiseLattice::trinomial(dim)),
        other => Err(CliError::Config {
            path: key.into(),
            message: format!("unknown lattice `{other}`"),
        }),
    }
}

fn explicit_instance(spec: &ExplicitInstance, registry: &ModelRegistry) -> Result<Instance, CliError> {
    let w = lattice(&spec.w_lattice, spec.dim, "w_lattice")?;
    let b = lattice(&spec.b_lattice, spec.dim, "b_lattice")?;
    let dims = Dims {
        d: spec.dim,
        m: w.dim(),
        n: b.dim(),
    };
    let tree = ScenarioTree::build(
        TimeGrid::uniform(spec.horizon, spec.steps)?,
        w,
        b,
        AtomSpace::from_weights(&spec.atom_weights)?,
    )?;
    let actions = ActionSet::bounded_euclidean(spec.actions.clone())?;
    let action_bound = actions.max_norm();
    let unknown = |key: &'static str| {
        move |e: mfcrand::Error| match e {
            mfcrand::Error::UnknownFamily(name) => CliError::Config {
                path: format!("{key}.name"),
                message: format!("unknown model family `{name}`"),
            },
            other => other.into(),
        }
    };
    let coeffs = registry.coefficients(
        &spec.coefficients.name,
        &FamilySpec {
            dims,
            params: &spec.coefficients.params,
            action_bound,
        },
    ).map_err(unknown("coefficients"))?;
    let reward = registry.reward(
        &spec.reward.name,
        &FamilySpec {
            dims,
            params: &spec.reward.params,
            action_bound,
        },
    ).map_err(unknown("reward"))?;
    let xi = InitialCondition::new(spec.dim, spec.xi.clone())?;
    let descriptor = InstanceDescriptor {
        label: spec.label.clone(),
        seed: None,
        steps: spec.steps,
        horizon: spec.horizon,
        atom_weights: spec.atom_weights.clone(),
        xi: spec.xi.clone(),
        actions: spec.actions.clone(),
        coefficients: spec.coefficients.name.clone(),
        coefficient_params: spec.coefficients.params.clone(),
        reward: spec.reward.name.clone(),
        reward_params: spec.reward.params.clone(),
    };
    Ok(Instance::new(descriptor, tree, coeffs, reward, actions, xi)?)
}
