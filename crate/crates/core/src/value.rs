//! The value computed three ways, and the identities tying them together.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::bsde::{
    bang_bang_intensity, evaluate_tilted, solve_bellman, solve_constrained_limit, solve_penalised, LimitReport,
};
use crate::controls::{
    default_lambda_family, enumerate_action_space, ActionSet, DecomposedAction, DecomposedControl, KappaKind,
    LambdaFamily, MarkCatalog, MarkId, DEFAULT_ACTION_CAP,
};
use crate::dynamics::{
    node_law, reward_eval_particles, reward_eval_tree, simulate_particles, step_node, tree_pushforward, MarkTree,
    ParticleControl, DEFAULT_MARK_BUDGET,
};
use crate::error::{Error, Result};
use crate::model::{
    law_of, Coefficients, Dims, InitialCondition, LinearCoefficients, NegativePart, QuadraticReward, Reward,
    FamilySpec,
};
use crate::randomisation::{sample_b_path, ConstantIntensity, IntensityControl, Randomisation};
use crate::rng::{mean_se, replicate, stream};
use crate::scenario::{AtomSpace, NoiseLattice, ScenarioTree, TimeGrid};

/// Serializable description of an instance.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceDescriptor {
    pub label: String,
    pub seed: Option<u64>,
    pub steps: usize,
    pub horizon: f64,
    pub atom_weights: Vec<f64>,
    pub xi: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub coefficients: String,
    pub coefficient_params: Vec<f64>,
    pub reward: String,
    pub reward_params: Vec<f64>,
}

/// A control problem on a scenario tree.
#[derive(Clone)]
pub struct Instance {
    pub descriptor: InstanceDescriptor,
    pub tree: ScenarioTree,
    pub coeffs: Arc<dyn Coefficients>,
    pub reward: Arc<dyn Reward>,
    pub actions: ActionSet,
    pub xi: InitialCondition,
    pub catalog: MarkCatalog,
}

impl Instance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        descriptor: InstanceDescriptor,
        tree: ScenarioTree,
        coeffs: Arc<dyn Coefficients>,
        reward: Arc<dyn Reward>,
        actions: ActionSet,
        xi: InitialCondition,
    ) -> Result<Self> {
        if xi.len() != tree.atom_count(0) {
            return Err(Error::MissingAtom {
                step: 0,
                expected: tree.atom_count(0),
                got: xi.len(),
            });
        }
        let catalog = MarkCatalog::build(&tree, actions.len(), DEFAULT_ACTION_CAP)?;
        Ok(Self {
            descriptor,
            tree,
            coeffs,
            reward,
            actions,
            xi,
            catalog,
        })
    }

    pub fn steps(&self) -> usize {
        self.tree.steps()
    }

    /// The same problem with the initial condition replaced.
    pub fn with_xi(&self, xi: InitialCondition) -> Result<Self> {
        let mut d = self.descriptor.clone();
        d.xi = xi.values().to_vec();
        Self::new(d, self.tree.clone(), self.coeffs.clone(), self.reward.clone(), self.actions.clone(), xi)
    }

    /// The problem restarted at step `s` from the given atom states.
    pub fn restarted(&self, s: usize, states: &[f64]) -> Result<Self> {
        let tree = self.tree.restart(s)?;
        let xi = InitialCondition::new(self.xi.dim(), states.to_vec())?;
        let mut d = self.descriptor.clone();
        d.label = format!("{} from step {s}", d.label);
        d.steps = tree.steps();
        d.atom_weights = tree.root_atoms().probs().to_vec();
        d.xi = states.to_vec();
        Self::new(d, tree, self.coeffs.clone(), self.reward.clone(), self.actions.clone(), xi)
    }

    /// `λ` built from one `κ` per step with `per_mark` mass on each charged
    /// mark.
    pub fn lambda(&self, kind: KappaKind, per_mark: f64) -> Result<LambdaFamily> {
        let widest = (0..self.steps())
            .map(|k| {
                let lo = if k == 0 { 0 } else { self.catalog.count(k - 1) };
                match kind {
                    KappaKind::UniformNew => self.catalog.count(k) - lo,
                    KappaKind::UniformFull => self.catalog.count(k),
                }
            })
            .max()
            .unwrap_or(1);
        default_lambda_family(&self.catalog, kind, per_mark * widest as f64)
    }

    pub fn mark_tree(&self, depth: usize) -> Result<MarkTree> {
        MarkTree::build(
            &self.tree,
            self.coeffs.as_ref(),
            self.reward.as_ref(),
            &self.actions,
            &self.catalog,
            &self.xi,
            depth,
            DEFAULT_MARK_BUDGET,
        )
    }

    pub fn randomisation<'a>(&'a self, lam: &'a LambdaFamily) -> Result<Randomisation<'a>> {
        Randomisation::new(&self.tree, &self.catalog, lam)
    }
}

/// Shape of a generated micro instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroShape {
    pub steps: usize,
    pub n_actions: usize,
}

/// Alternates `(3 steps, 2 actions)` and `(2 steps, 3 actions)`.
pub fn micro_shape(index: u64) -> MicroShape {
    if index % 2 == 0 {
        MicroShape { steps: 3, n_actions: 2 }
    } else {
        MicroShape { steps: 2, n_actions: 3 }
    }
}

/// A random micro instance: `d = 1`, two root atoms, binary `W` and `B`,
/// linear coefficients and a linear-quadratic reward, horizon 1.
pub fn micro_instance(seed: u64, index: u64, shape: MicroShape) -> Result<Instance> {
    let mut rng = stream(seed, index);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let w0 = u(0.3, 0.7);
    let xi = vec![u(-1.0, 1.0), u(-1.0, 1.0)];
    let cp = [
        u(-0.2, 0.2),
        u(-0.5, 0.5),
        u(-0.5, 0.5),
        u(0.2, 1.0),
        u(0.1, 0.4),
        u(-0.2, 0.2),
        u(0.1, 0.4),
    ];
    let rp = vec![u(0.0, 0.5), u(0.0, 1.0), u(0.0, 0.5), u(0.0, 1.0), u(0.0, 1.0), u(-0.5, 0.5)];
    let n = shape.n_actions;
    let actions: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![-1.0 + 2.0 * i as f64 / (n - 1).max(1) as f64])
        .collect();
    let tree = ScenarioTree::build(
        TimeGrid::uniform(1.0, shape.steps)?,
        NoiseLattice::binary(1),
        NoiseLattice::binary(1),
        AtomSpace::from_weights(&[w0, 1.0 - w0])?,
    )?;
    let dims = Dims { d: 1, m: 1, n: 1 };
    let coeffs = LinearCoefficients::new(dims, cp, 1.0);
    let reward = QuadraticReward::from_params(&FamilySpec {
        dims,
        params: &rp,
        action_bound: 1.0,
    })?;
    let descriptor = InstanceDescriptor {
        label: format!("micro-{index}"),
        seed: Some(seed),
        steps: shape.steps,
        horizon: 1.0,
        atom_weights: vec![w0, 1.0 - w0],
        xi: xi.clone(),
        actions: actions.clone(),
        coefficients: "linear".into(),
        coefficient_params: cp.to_vec(),
        reward: "linear-quadratic".into(),
        reward_params: rp,
    };
    Instance::new(
        descriptor,
        tree,
        Arc::new(coeffs),
        Arc::new(reward),
        ActionSet::bounded_euclidean(actions)?,
        InitialCondition::scalar(&xi),
    )
}

struct Direct<'a> {
    tree: &'a ScenarioTree,
    coeffs: &'a dyn Coefficients,
    reward: &'a dyn Reward,
    actions: &'a ActionSet,
    spaces: Vec<Vec<DecomposedAction>>,
    d: usize,
}

impl Direct<'_> {
    fn value(&self, k: usize, states: &[f64]) -> Result<f64> {
        let tree = self.tree;
        let d = self.d;
        let law = node_law(tree, k, states, d)?;
        let w = &tree.atoms(k).weight;
        if k == tree.steps() {
            return Ok((0..w.len())
                .map(|a| w[a] * self.reward.terminal(&states[a * d..(a + 1) * d], &law))
                .sum());
        }
        let (t, dt) = (tree.grid().time(k), tree.grid().dt(k));
        let probs = tree.b_lattice().probs();
        let mut best = f64::NEG_INFINITY;
        for act in &self.spaces[k] {
            let acts = act.values();
            let f: f64 = (0..w.len())
                .map(|a| {
                    w[a] * self
                        .reward
                        .running(t, &states[a * d..(a + 1) * d], &law, self.actions.value(acts[a]))
                })
                .sum();
            let mut cont = 0.0;
            for (e, p) in probs.iter().enumerate() {
                let next = step_node(tree, self.coeffs, self.actions, k, states, &law, acts, e);
                cont += p * self.value(k + 1, &next)?;
            }
            best = best.max(f * dt + cont);
        }
        Ok(best)
    }
}

/// Brute-force `V(t, ξ)`: at every common node, maximise over all decomposed
/// actions of the step.
pub fn value_direct(
    tree: &ScenarioTree,
    coeffs: &dyn Coefficients,
    reward: &dyn Reward,
    actions: &ActionSet,
    xi: &InitialCondition,
    cap: usize,
) -> Result<f64> {
    if xi.len() != tree.atom_count(0) {
        return Err(Error::MissingAtom {
            step: 0,
            expected: tree.atom_count(0),
            got: xi.len(),
        });
    }
    let spaces = (0..tree.steps())
        .map(|k| enumerate_action_space(tree, k, actions.len(), cap))
        .collect::<Result<Vec<_>>>()?;
    let direct = Direct {
        tree,
        coeffs,
        reward,
        actions,
        spaces,
        d: xi.dim(),
    };
    direct.value(0, xi.values())
}

pub fn instance_value_direct(inst: &Instance) -> Result<f64> {
    value_direct(
        &inst.tree,
        inst.coeffs.as_ref(),
        inst.reward.as_ref(),
        &inst.actions,
        &inst.xi,
        DEFAULT_ACTION_CAP,
    )
}

/// `V(s, ·)` at every node of a mark tree truncated at `s`.
fn restarted_values(inst: &Instance, mt: &MarkTree, s: usize) -> Result<Vec<f64>> {
    if s == inst.steps() {
        return Ok(mt.terminal().to_vec());
    }
    let sub = inst.tree.restart(s)?;
    (0..mt.node_count(s))
        .map(|node| {
            let xi = InitialCondition::new(inst.xi.dim(), mt.node_states(&inst.tree, s, node).to_vec())?;
            value_direct(
                &sub,
                inst.coeffs.as_ref(),
                inst.reward.as_ref(),
                &inst.actions,
                &xi,
                DEFAULT_ACTION_CAP,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeValue {
    pub alpha_t: MarkId,
    /// Constrained limit at the root.
    pub limit: f64,
    pub richardson: f64,
    pub report: LimitReport,
}

/// `Y_t` of the constrained equation, via the penalised sequence at `levels`.
pub fn value_randomised_bsde(
    inst: &Instance,
    lam: &LambdaFamily,
    alpha_t: MarkId,
    levels: &[f64],
) -> Result<BsdeValue> {
    let mt = inst.mark_tree(inst.steps())?;
    let (limit, _, report) = solve_constrained_limit(&mt, lam, levels, alpha_t, mt.terminal())?;
    Ok(BsdeValue {
        alpha_t,
        limit: limit.root(),
        richardson: report.richardson_root,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct McEntry {
    pub name: String,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McValue {
    pub best: f64,
    pub best_se: f64,
    pub best_name: String,
    pub entries: Vec<McEntry>,
}

/// Particle estimate of `J^R(ν) = E[L^ν (g + Σ fΔ)]` for every intensity in
/// `family`, sampling the marks directly under the tilted law. All members use
/// the same random streams.
#[allow(clippy::too_many_arguments)]
pub fn value_randomised_mc(
    inst: &Instance,
    rand: &Randomisation,
    alpha_t: MarkId,
    family: &[&dyn IntensityControl],
    n_particles: usize,
    reps: usize,
    seed: u64,
) -> Result<McValue> {
    if family.is_empty() {
        return Err(Error::Precondition("empty intensity family".into()));
    }
    if reps < 2 {
        return Err(Error::Precondition("need at least two replications".into()));
    }
    let mut entries = Vec::with_capacity(family.len());
    for nu in family {
        let samples = replicate(reps, seed, |_, rng| -> Result<f64> {
            let b = sample_b_path(&inst.tree, rng);
            let mpp = rand.sample_tilted(*nu, &b, alpha_t, rng)?;
            let marks = rand.step_marks(alpha_t, &mpp)?;
            let ctl = ParticleControl::Marks(&marks, &inst.catalog);
            let path = simulate_particles(
                &inst.tree,
                inst.coeffs.as_ref(),
                &inst.actions,
                &inst.xi,
                ctl,
                n_particles,
                b,
                rng,
            )?;
            reward_eval_particles(&inst.tree, inst.reward.as_ref(), &inst.actions, &path, ctl)
        });
        let samples: Vec<f64> = samples.into_iter().collect::<Result<_>>()?;
        let (mean, se) = mean_se(&samples);
        entries.push(McEntry {
            name: nu.name(),
            mean,
            se,
        });
    }
    let best = entries
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .expect("non-empty family");
    Ok(McValue {
        best: best.mean,
        best_se: best.se,
        best_name: best.name.clone(),
        entries,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Consistency {
    pub tree: f64,
    pub mc: f64,
    pub se: f64,
}

/// Exact `J` of a decomposed control against its particle estimate.
pub fn mc_tree_consistency(
    inst: &Instance,
    control: &DecomposedControl,
    n_particles: usize,
    reps: usize,
    seed: u64,
) -> Result<Consistency> {
    let path = tree_pushforward(&inst.tree, inst.coeffs.as_ref(), &inst.actions, &inst.xi, control)?;
    let exact = reward_eval_tree(&inst.tree, inst.reward.as_ref(), &inst.actions, &path, control)?;
    let samples = replicate(reps, seed, |_, rng| -> Result<f64> {
        let b = sample_b_path(&inst.tree, rng);
        let ctl = ParticleControl::Decomposed(control);
        let p = simulate_particles(
            &inst.tree,
            inst.coeffs.as_ref(),
            &inst.actions,
            &inst.xi,
            ctl,
            n_particles,
            b,
            rng,
        )?;
        reward_eval_particles(&inst.tree, inst.reward.as_ref(), &inst.actions, &p, ctl)
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_>>()?;
    let (mc, se) = mean_se(&samples);
    Ok(Consistency { tree: exact, mc, se })
}

/// Penalty levels and floors of the bang-bang intensity grid.
pub const NU_GRID_LEVELS: [f64; 4] = [1e3, 1e6, 1e9, 1e12];
pub const NU_GRID_FLOORS: [f64; 2] = [1e-3, 1e-9];

/// Best tilted value over `ν ≡ 1` and the bang-bang intensities of pilot
/// penalised solves; returns `(value, name)`.
fn best_over_grid(mt: &MarkTree, lam: &LambdaFamily, alpha_t: MarkId, terminal: &[f64]) -> Result<(f64, String)> {
    let one = ConstantIntensity(1.0);
    let mut best = (evaluate_tilted(mt, lam, &one, alpha_t, terminal)?[0][0], one.name());
    for n in NU_GRID_LEVELS {
        let pilot = solve_penalised(mt, lam, n, alpha_t, terminal)?;
        for eps in NU_GRID_FLOORS {
            let nu = bang_bang_intensity(mt, &pilot, n, eps)?;
            let v = evaluate_tilted(mt, lam, &nu, alpha_t, terminal)?[0][0];
            if v > best.0 {
                best = (v, nu.name());
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Serialize)]
pub struct DppReport {
    pub s: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub best_intensity: String,
}

/// `|V(t, ξ) − sup_ν E^ν[V(s, X_s) + Σ_{k<s} f Δ]|` with the inner value from
/// the brute-force oracle at every node at `s`.
pub fn dpp_check(inst: &Instance, lam: &LambdaFamily, alpha_t: MarkId, s: usize) -> Result<DppReport> {
    if s > inst.steps() {
        return Err(Error::InvalidGrid(format!("step {s} beyond the horizon")));
    }
    let lhs = instance_value_direct(inst)?;
    if s == 0 {
        let rhs = instance_value_direct(inst)?;
        return Ok(DppReport {
            s,
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
            best_intensity: "none".into(),
        });
    }
    let mt = inst.mark_tree(s)?;
    let terminal = restarted_values(inst, &mt, s)?;
    let (rhs, name) = best_over_grid(&mt, lam, alpha_t, &terminal)?;
    Ok(DppReport {
        s,
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
        best_intensity: name,
    })
}

/// Largest `|Y^∞_s(node) − V(s, X_s(node))|` over interior steps and nodes.
pub fn restart_consistency_check(inst: &Instance, lam: &LambdaFamily, alpha_t: MarkId) -> Result<f64> {
    let mt = inst.mark_tree(inst.steps())?;
    let sol = solve_bellman(&mt, lam, alpha_t, mt.terminal())?;
    let mut worst: f64 = 0.0;
    for s in 1..inst.steps() {
        let direct = restarted_values(inst, &mt, s)?;
        for (y, v) in sol.y[s].iter().zip(&direct) {
            worst = worst.max((y - v).abs());
        }
    }
    Ok(worst)
}

/// `|V(ξ₁) − V(ξ₂)|` for two initial conditions with the same law; `other`
/// may live on a different root atom space.
pub fn law_invariance_check(inst: &Instance, other: &Instance) -> Result<f64> {
    let l1 = law_of(&inst.xi, inst.tree.root_atoms())?;
    let l2 = law_of(&other.xi, other.tree.root_atoms())?;
    if !l1.same_law(&l2, 1e-12) {
        return Err(Error::Precondition("initial conditions have different laws".into()));
    }
    Ok((instance_value_direct(inst)? - instance_value_direct(other)?).abs())
}

/// The instance with root atoms relabelled by `perm`: atom `i` takes the
/// weight and initial state of atom `perm[i]`.
pub fn permuted_instance(inst: &Instance, perm: &[usize]) -> Result<Instance> {
    let xi = inst.xi.permuted(perm)?;
    let roots = inst.tree.root_atoms();
    let weights: Vec<f64> = perm.iter().map(|&p| roots.prob(p)).collect();
    let tree = ScenarioTree::build(
        inst.tree.grid().clone(),
        inst.tree.w_lattice().clone(),
        inst.tree.b_lattice().clone(),
        AtomSpace::from_weights(&weights)?,
    )?;
    let mut d = inst.descriptor.clone();
    d.label = format!("{} permuted {perm:?}", d.label);
    d.atom_weights = weights;
    d.xi = xi.values().to_vec();
    Instance::new(d, tree, inst.coeffs.clone(), inst.reward.clone(), inst.actions.clone(), xi)
}

#[derive(Debug, Clone, Serialize)]
pub struct RestrictionReport {
    pub s: usize,
    /// Probability that the pre-start history has an even number of events.
    pub p_even: f64,
    pub sup_restricted: f64,
    pub sup_full: f64,
    pub residual: f64,
}

/// Compares `sup` over intensities that ignore the history before the start
/// with `sup` over intensities that may read it.
///
/// The problem is restarted at step `s` from the root-path states reached
/// under `α_t`; before the restart the point process runs with `λ_0`, and the
/// history-dependent intensities switch on the parity of its event count.
pub fn restriction_check(
    inst: &Instance,
    kind: KappaKind,
    per_mark: f64,
    alpha_t: MarkId,
    s: usize,
) -> Result<RestrictionReport> {
    if s >= inst.steps() {
        return Err(Error::InvalidGrid(format!("restriction needs s < T, got {s}")));
    }
    let (sub, alpha_sub, pre_window) = if s == 0 {
        (inst.clone(), alpha_t, 0.0)
    } else {
        let follow = DecomposedControl::from_fn(&inst.tree, |k, _| {
            inst.catalog
                .as_action(&inst.tree, k, alpha_t)
                .expect("α_t is measurable at every later step")
        })?;
        let path = tree_pushforward(&inst.tree, inst.coeffs.as_ref(), &inst.actions, &inst.xi, &follow)?;
        let sub = inst.restarted(s, path.node_states(&inst.tree, s, 0))?;
        // α_t lifted to the restart's first step.
        let lifted = inst.catalog.as_action(&inst.tree, s, alpha_t)?;
        let sub_action = DecomposedAction::new(&sub.tree, 0, lifted.values().to_vec())?;
        let alpha_sub = sub
            .catalog
            .find(&sub.tree, &sub_action)
            .ok_or_else(|| Error::InvalidControl("α_t not in the restarted catalog".into()))?;
        (sub, alpha_sub, inst.tree.grid().time(s))
    };
    let lam = sub.lambda(kind, per_mark)?;
    let p_even = if s == 0 {
        1.0
    } else {
        0.5 * (1.0 + (-2.0 * lam.total(0) * pre_window).exp())
    };
    let mt = sub.mark_tree(sub.steps())?;
    let terminal = mt.terminal().to_vec();
    let one = ConstantIntensity(1.0);
    let mut values = vec![evaluate_tilted(&mt, &lam, &one, alpha_sub, &terminal)?[0][0]];
    for n in NU_GRID_LEVELS {
        let pilot = solve_penalised(&mt, &lam, n, alpha_sub, &terminal)?;
        for eps in NU_GRID_FLOORS {
            let nu = bang_bang_intensity(&mt, &pilot, n, eps)?;
            values.push(evaluate_tilted(&mt, &lam, &nu, alpha_sub, &terminal)?[0][0]);
        }
    }
    let sup_restricted = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sup_full = f64::NEG_INFINITY;
    for even in &values {
        for odd in &values {
            sup_full = sup_full.max(p_even * even + (1.0 - p_even) * odd);
        }
    }
    Ok(RestrictionReport {
        s,
        p_even,
        sup_restricted,
        sup_full,
        residual: (sup_full - sup_restricted).abs(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityPoint {
    pub eps: f64,
    pub change: f64,
    pub ratio: f64,
}

/// `|J^R(ξ + ε, α_t, ν) − J^R(ξ, α_t, ν)|` on the exact tree.
pub fn continuity_check(
    inst: &Instance,
    lam: &LambdaFamily,
    alpha_t: MarkId,
    nu: &dyn IntensityControl,
    eps: &[f64],
) -> Result<Vec<ContinuityPoint>> {
    let base_tree = inst.mark_tree(inst.steps())?;
    let base = evaluate_tilted(&base_tree, lam, nu, alpha_t, base_tree.terminal())?[0][0];
    eps.iter()
        .map(|&e| {
            let shifted = inst.with_xi(inst.xi.shifted(e))?;
            let mt = shifted.mark_tree(inst.steps())?;
            let v = evaluate_tilted(&mt, lam, nu, alpha_t, mt.terminal())?[0][0];
            let change = (v - base).abs();
            Ok(ContinuityPoint {
                eps: e,
                change,
                ratio: change / e,
            })
        })
        .collect()
}

/// Values reported by the suite for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct ValueReport {
    pub instance: InstanceDescriptor,
    pub v_direct: f64,
    /// `(n, Y^n_t)` per level.
    pub v_bsde_levels: Vec<(f64, f64)>,
    pub v_bsde_limit: f64,
    pub v_bsde_richardson: f64,
    pub v_mc: Option<McValue>,
    pub equivalence_residual: f64,
    pub alpha_residual: f64,
    pub lambda_residual: f64,
    pub dpp_residuals: Vec<(usize, f64)>,
    pub law_invariance_residual: f64,
    pub restart_residual: f64,
}

impl ValueReport {
    pub const CSV_HEADER: &'static str = "instance,v_direct,v_bsde_limit,v_bsde_richardson,equivalence_residual,alpha_residual,lambda_residual,max_dpp_residual,law_invariance_residual,restart_residual";

    pub fn csv_row(&self) -> String {
        let dpp = self.dpp_residuals.iter().map(|r| r.1).fold(0.0, f64::max);
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.instance.label,
            self.v_direct,
            self.v_bsde_limit,
            self.v_bsde_richardson,
            self.equivalence_residual,
            self.alpha_residual,
            self.lambda_residual,
            dpp,
            self.law_invariance_residual,
            self.restart_residual
        )
    }
}

/// Settings of the equivalence suite.
#[derive(Debug, Clone)]
pub struct SuiteSettings {
    pub levels: Vec<f64>,
    pub per_mark: f64,
    pub kinds: [KappaKind; 2],
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            levels: (0..=8).map(|i| 2f64.powi(i)).collect(),
            per_mark: 1e6,
            kinds: [KappaKind::UniformNew, KappaKind::UniformFull],
        }
    }
}

/// Every exact identity on one instance.
pub fn value_report(inst: &Instance, settings: &SuiteSettings) -> Result<ValueReport> {
    let v_direct = instance_value_direct(inst)?;
    let lam = inst.lambda(settings.kinds[0], settings.per_mark)?;
    let mt = inst.mark_tree(inst.steps())?;
    let mut alpha_values = Vec::new();
    let mut first = None;
    for alpha_t in 0..inst.catalog.count(0) {
        let (limit, sols, report) = solve_constrained_limit(&mt, &lam, &settings.levels, alpha_t, mt.terminal())?;
        alpha_values.push(limit.root());
        if first.is_none() {
            first = Some((sols.iter().map(|s| s.root()).collect::<Vec<_>>(), report));
        }
    }
    let (level_values, report) = first.expect("𝒜_t is non-empty");
    let spread = |xs: &[f64]| {
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let lam2 = inst.lambda(settings.kinds[1], settings.per_mark)?;
    let other = solve_bellman(&mt, &lam2, 0, mt.terminal())?.root();
    let perm: Vec<usize> = (0..inst.tree.atom_count(0)).rev().collect();
    let law_invariance_residual = law_invariance_check(inst, &permuted_instance(inst, &perm)?)?;
    let dpp_residuals = (1..inst.steps())
        .map(|s| Ok((s, dpp_check(inst, &lam, 0, s)?.residual)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueReport {
        instance: inst.descriptor.clone(),
        v_direct,
        v_bsde_levels: settings.levels.iter().copied().zip(level_values).collect(),
        v_bsde_limit: alpha_values[0],
        v_bsde_richardson: report.richardson_root,
        v_mc: None,
        equivalence_residual: (alpha_values[0] - v_direct).abs(),
        alpha_residual: spread(&alpha_values),
        lambda_residual: (other - alpha_values[0]).abs(),
        dpp_residuals,
        law_invariance_residual,
        restart_residual: restart_consistency_check(inst, &lam, 0)?,
    })
}

/// Paper-stated values of the introduction's example.
pub const INTRO_CLAIMED_V: f64 = 0.859_140_914_229_522_6; // (e − 1)/2
pub const INTRO_CLAIMED_V_MINUS: f64 = 0.218_281_828_459_045_1; // e − 5/2
pub const INTRO_CLAIMED_V_PLUS: f64 = 1.718_281_828_459_045; // e − 1

#[derive(Debug, Clone, Serialize)]
pub struct IntroConvention {
    pub convention: String,
    pub v: f64,
    pub v_minus: f64,
    pub v_plus: f64,
    /// `|V(ξ) − ½(V(ξ,−1) + V(ξ,1))|`.
    pub gap: f64,
    /// Decoupled values when the control may depend on the population atom:
    /// the tagged state follows the control of a uniformly drawn atom.
    pub v_minus_atomwise: f64,
    pub v_plus_atomwise: f64,
    pub gap_atomwise: f64,
    /// `J(ξ, α ≡ 1)`.
    pub j_all_plus: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntroReport {
    pub steps: usize,
    pub conventions: Vec<IntroConvention>,
    pub claimed_v: f64,
    pub claimed_v_minus: f64,
    pub claimed_v_plus: f64,
    pub claimed_average: f64,
}

/// A bang-bang control with at most one switch on the grid: `first` on
/// `[0, τ)`, `second` on `[τ, 1]`.
#[derive(Debug, Clone, Copy)]
struct OneSwitch {
    first: f64,
    second: f64,
    tau: f64,
}

impl OneSwitch {
    fn all(steps: usize) -> Vec<Self> {
        let mut out = Vec::new();
        for first in [-1.0, 1.0] {
            for second in [-1.0, 1.0] {
                for j in 0..=steps {
                    if first == second && j > 0 {
                        continue;
                    }
                    out.push(Self {
                        first,
                        second,
                        tau: j as f64 / steps as f64,
                    });
                }
            }
        }
        out
    }

    fn at(&self, s: f64) -> f64 {
        if s < self.tau {
            self.first
        } else {
            self.second
        }
    }
}

/// Exact flow of `x' = a(s) + m(s)`, `m' = ā(s) + m` over `[0, 1]` for
/// piecewise-constant controls; returns `(m(1), x_i(1))`.
fn intro_flow(m0: f64, x0: &[f64], controls: &[OneSwitch], weights: &[f64]) -> (f64, Vec<f64>) {
    let mut cuts: Vec<f64> = controls.iter().map(|c| c.tau).filter(|t| *t > 0.0 && *t < 1.0).collect();
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut m = m0;
    let mut x = x0.to_vec();
    for w in cuts.windows(2) {
        let h = w[1] - w[0];
        let a: Vec<f64> = controls.iter().map(|c| c.at(w[0])).collect();
        let abar: f64 = a.iter().zip(weights).map(|(a, p)| a * p).sum();
        let grow = h.exp_m1();
        // ∫_0^h m = (m + ā)(e^h − 1) − ā h
        let integral = (m + abar) * grow - abar * h;
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += ai * h + integral;
        }
        m = (m + abar) * (1.0 + grow) - abar;
    }
    (m, x)
}

/// The introduction's example on `[0, 1]` with `ξ = ±1` equally likely,
/// searched over one-switch bang-bang controls on a grid of `steps` cells.
pub fn intro_example(steps: usize) -> Result<IntroReport> {
    if steps < 100 {
        return Err(Error::Precondition(format!("need at least 100 grid cells, got {steps}")));
    }
    let controls = OneSwitch::all(steps);
    let weights = [0.5, 0.5];
    let x0 = [-1.0, 1.0];
    let mut conventions = Vec::new();
    for convention in [NegativePart::Min, NegativePart::Max] {
        let reward = crate::model::IntroReward::new(convention);
        // Per-atom controls for V(ξ).
        let mut v = f64::NEG_INFINITY;
        for c1 in &controls {
            for c2 in &controls {
                let (_, x) = intro_flow(0.0, &x0, &[*c1, *c2], &weights);
                v = v.max(0.5 * reward.payoff(x[0]) + 0.5 * reward.payoff(x[1]));
            }
        }
        // One deterministic control drives both the population and the
        // tagged state started at x.
        let decoupled = |x: f64| {
            controls
                .iter()
                .map(|c| {
                    let (_, states) = intro_flow(0.0, &[x0[0], x0[1], x], &[*c, *c, *c], &[0.5, 0.5, 0.0]);
                    reward.payoff(states[2])
                })
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let v_minus = decoupled(-1.0);
        let v_plus = decoupled(1.0);
        let atomwise = |x: f64| {
            let mut best = f64::NEG_INFINITY;
            for c1 in &controls {
                for c2 in &controls {
                    let (_, s) = intro_flow(
                        0.0,
                        &[x0[0], x0[1], x, x],
                        &[*c1, *c2, *c1, *c2],
                        &[0.5, 0.5, 0.0, 0.0],
                    );
                    best = best.max(0.5 * reward.payoff(s[2]) + 0.5 * reward.payoff(s[3]));
                }
            }
            best
        };
        let v_minus_atomwise = atomwise(-1.0);
        let v_plus_atomwise = atomwise(1.0);
        let plus = OneSwitch {
            first: 1.0,
            second: 1.0,
            tau: 0.0,
        };
        let (_, x) = intro_flow(0.0, &x0, &[plus, plus], &weights);
        conventions.push(IntroConvention {
            convention: convention.label().into(),
            v,
            v_minus,
            v_plus,
            gap: (v - 0.5 * (v_minus + v_plus)).abs(),
            v_minus_atomwise,
            v_plus_atomwise,
            gap_atomwise: (v - 0.5 * (v_minus_atomwise + v_plus_atomwise)).abs(),
            j_all_plus: 0.5 * reward.payoff(x[0]) + 0.5 * reward.payoff(x[1]),
        });
    }
    Ok(IntroReport {
        steps,
        conventions,
        claimed_v: INTRO_CLAIMED_V,
        claimed_v_minus: INTRO_CLAIMED_V_MINUS,
        claimed_v_plus: INTRO_CLAIMED_V_PLUS,
        claimed_average: 0.5 * (INTRO_CLAIMED_V_MINUS + INTRO_CLAIMED_V_PLUS),
    })
}
