//! Decomposed action spaces, control sets, their pseudometrics and the
//! λ-family used by the randomisation.
//!
//! A [`DecomposedAction`] at step `s` is a map from the step-`s` atoms to action
//! indices; since atoms at step `s` are exactly the atoms of `𝒢 ∨ ℱ^W_{t_s}`,
//! every such map is measurable at `s`, and it is measurable at an earlier step
//! `r` iff it is constant on the descendants of each step-`r` atom.

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::scenario::ScenarioTree;

/// Default cap on the number of decomposed actions enumerated at one step.
pub const DEFAULT_ACTION_CAP: usize = 4096;

/// Finite action set with a metric `ρ < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    values: Vec<Vec<f64>>,
    metric: Vec<f64>,
}

impl ActionSet {
    /// `metric` is the row-major `k × k` distance matrix.
    pub fn new(values: Vec<Vec<f64>>, metric: Vec<f64>) -> Result<Self> {
        let k = values.len();
        if k == 0 {
            return Err(Error::InvalidControl("empty action set".into()));
        }
        if metric.len() != k * k {
            return Err(Error::InvalidControl("metric matrix has the wrong size".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidControl("actions of mixed dimension".into()));
        }
        let rho = |i: usize, j: usize| metric[i * k + j];
        for i in 0..k {
            if rho(i, i) != 0.0 {
                return Err(Error::InvalidControl("metric nonzero on the diagonal".into()));
            }
            for j in 0..k {
                let r = rho(i, j);
                if !(0.0..1.0).contains(&r) {
                    return Err(Error::InvalidControl(format!("ρ({i},{j}) = {r} outside [0,1)")));
                }
                if r != rho(j, i) {
                    return Err(Error::InvalidControl("metric not symmetric".into()));
                }
                if i != j && r == 0.0 {
                    return Err(Error::InvalidControl("distinct actions at distance 0".into()));
                }
                for l in 0..k {
                    if r > rho(i, l) + rho(l, j) + 1e-15 {
                        return Err(Error::InvalidControl("triangle inequality fails".into()));
                    }
                }
            }
        }
        Ok(Self { values, metric })
    }

    /// All distinct pairs at distance `rho`.
    pub fn discrete(values: Vec<Vec<f64>>, rho: f64) -> Result<Self> {
        let k = values.len();
        let metric = (0..k * k)
            .map(|ij| if ij / k == ij % k { 0.0 } else { rho })
            .collect();
        Self::new(values, metric)
    }

    /// `ρ(a, b) = |a − b| / (1 + |a − b|)`.
    pub fn bounded_euclidean(values: Vec<Vec<f64>>) -> Result<Self> {
        let k = values.len();
        let mut metric = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d = values[i]
                    .iter()
                    .zip(&values[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                metric[i * k + j] = d / (1.0 + d);
            }
        }
        Self::new(values, metric)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn rho(&self, i: usize, j: usize) -> f64 {
        self.metric[i * self.len() + j]
    }

    pub fn sup_rho(&self) -> f64 {
        self.metric.iter().copied().fold(0.0, f64::max)
    }

    /// Largest Euclidean norm of an action value.
    pub fn max_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// An element of `𝒜_s`: one action index per step-`s` atom.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DecomposedAction {
    step: usize,
    values: Vec<usize>,
}

impl DecomposedAction {
    pub fn new(tree: &ScenarioTree, step: usize, values: Vec<usize>) -> Result<Self> {
        if step > tree.steps() {
            return Err(Error::InvalidControl(format!("step {step} beyond the horizon")));
        }
        if values.len() != tree.atom_count(step) {
            return Err(Error::MissingAtom {
                step,
                expected: tree.atom_count(step),
                got: values.len(),
            });
        }
        Ok(Self { step, values })
    }

    pub fn constant(tree: &ScenarioTree, step: usize, action: usize) -> Self {
        Self {
            step,
            values: vec![action; tree.atom_count(step)],
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn at(&self, atom: usize) -> usize {
        self.values[atom]
    }

    /// Same map seen at a later step (`𝒜_u ⊆ 𝒜_v`).
    pub fn lift(&self, tree: &ScenarioTree, to: usize) -> Self {
        debug_assert!(to >= self.step);
        let values = (0..tree.atom_count(to))
            .map(|a| self.values[tree.atom_ancestor(to, a, self.step)])
            .collect();
        Self { step: to, values }
    }

    pub fn measurable_at(&self, tree: &ScenarioTree, s: usize) -> bool {
        if s >= self.step {
            return true;
        }
        let block = tree.w_branching().pow((self.step - s) as u32);
        self.values
            .chunks(block)
            .all(|c| c.iter().all(|v| *v == c[0]))
    }

    /// The map seen at an earlier step `to`, if it is measurable there.
    pub fn restrict(&self, tree: &ScenarioTree, to: usize) -> Result<Self> {
        if to >= self.step {
            return Ok(self.lift(tree, to));
        }
        if !self.measurable_at(tree, to) {
            return Err(Error::NotMeasurable(format!(
                "action at step {} is not determined by the atoms at step {to}",
                self.step
            )));
        }
        let block = tree.w_branching().pow((self.step - to) as u32);
        Ok(Self {
            step: to,
            values: self.values.iter().step_by(block).copied().collect(),
        })
    }

    /// Smallest step at which the map is measurable.
    pub fn birth(&self, tree: &ScenarioTree) -> usize {
        (0..=self.step)
            .find(|&s| self.measurable_at(tree, s))
            .unwrap_or(self.step)
    }

    /// `{"step": k, "map": {atom label: action index}}`.
    pub fn to_json(&self, tree: &ScenarioTree) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .values
            .iter()
            .enumerate()
            .map(|(a, v)| (tree.atom_label(self.step, a), json!(v)))
            .collect();
        json!({ "step": self.step, "map": map })
    }
}

/// `ρ̂(φ¹, φ²) = E[ρ(φ¹, φ²)]`.
pub fn rho_hat(
    tree: &ScenarioTree,
    actions: &ActionSet,
    a1: &DecomposedAction,
    a2: &DecomposedAction,
) -> Result<f64> {
    if a1.step != a2.step {
        return Err(Error::InvalidControl(format!(
            "ρ̂ between steps {} and {}",
            a1.step, a2.step
        )));
    }
    let w = &tree.atoms(a1.step).weight;
    Ok(a1
        .values
        .iter()
        .zip(&a2.values)
        .zip(w)
        .map(|((x, y), w)| w * actions.rho(*x, *y))
        .sum())
}

/// An element of `𝒜̂`: for each step `k` and common node at `k`, a
/// decomposed action at step `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecomposedControl {
    per_step: Vec<Vec<DecomposedAction>>,
}

impl DecomposedControl {
    pub fn new(tree: &ScenarioTree, per_step: Vec<Vec<DecomposedAction>>) -> Result<Self> {
        if per_step.len() != tree.steps() {
            return Err(Error::InvalidControl(format!(
                "{} steps of control for {} grid steps",
                per_step.len(),
                tree.steps()
            )));
        }
        for (k, nodes) in per_step.iter().enumerate() {
            if nodes.len() != tree.node_count(k) {
                return Err(Error::InvalidControl(format!(
                    "step {k}: {} node actions for {} nodes",
                    nodes.len(),
                    tree.node_count(k)
                )));
            }
            if let Some(a) = nodes.iter().find(|a| a.step != k) {
                return Err(Error::NotMeasurable(format!(
                    "step {k} uses an action indexed at step {}",
                    a.step
                )));
            }
        }
        Ok(Self { per_step })
    }

    pub fn from_fn(
        tree: &ScenarioTree,
        mut f: impl FnMut(usize, usize) -> DecomposedAction,
    ) -> Result<Self> {
        let per_step = (0..tree.steps())
            .map(|k| (0..tree.node_count(k)).map(|v| f(k, v)).collect())
            .collect();
        Self::new(tree, per_step)
    }

    pub fn constant(tree: &ScenarioTree, action: usize) -> Self {
        Self {
            per_step: (0..tree.steps())
                .map(|k| vec![DecomposedAction::constant(tree, k, action); tree.node_count(k)])
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn at(&self, step: usize, node: usize) -> &DecomposedAction {
        &self.per_step[step][node]
    }

    pub fn action(&self, step: usize, node: usize, atom: usize) -> usize {
        self.per_step[step][node].values[atom]
    }
}

/// An element of `𝒜`: an action index for every step and every terminal
/// (common node, atom) outcome. Adaptedness is not assumed; it is checked by
/// [`identify_flat_to_decomposed`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatControl {
    steps: usize,
    nodes: usize,
    atoms: usize,
    values: Vec<usize>,
}

impl FlatControl {
    pub fn from_fn(tree: &ScenarioTree, mut f: impl FnMut(usize, usize, usize) -> usize) -> Self {
        let m = tree.steps();
        let (nodes, atoms) = (tree.node_count(m), tree.atom_count(m));
        let mut values = Vec::with_capacity(m * nodes * atoms);
        for k in 0..m {
            for v in 0..nodes {
                for a in 0..atoms {
                    values.push(f(k, v, a));
                }
            }
        }
        Self {
            steps: m,
            nodes,
            atoms,
            values,
        }
    }

    /// Built from a function of `(k, node at k, atom at k)`, hence adapted.
    pub fn adapted(tree: &ScenarioTree, mut f: impl FnMut(usize, usize, usize) -> usize) -> Self {
        let m = tree.steps();
        Self::from_fn(tree, |k, v, a| {
            f(k, tree.node_ancestor(m, v, k), tree.atom_ancestor(m, a, k))
        })
    }

    pub fn value(&self, step: usize, node: usize, atom: usize) -> usize {
        self.values[(step * self.nodes + node) * self.atoms + atom]
    }
}

/// Slices a flat control into per-node decomposed actions, checking that the
/// slice at step `k` depends only on the node and atom at `k`.
pub fn identify_flat_to_decomposed(
    tree: &ScenarioTree,
    alpha: &FlatControl,
) -> Result<DecomposedControl> {
    let m = tree.steps();
    if alpha.steps != m || alpha.nodes != tree.node_count(m) || alpha.atoms != tree.atom_count(m)
    {
        return Err(Error::InvalidControl("flat control does not match the tree".into()));
    }
    let mut per_step = Vec::with_capacity(m);
    for k in 0..m {
        let mut nodes = Vec::with_capacity(tree.node_count(k));
        let mut slice: Vec<Option<usize>> = Vec::new();
        for v in 0..tree.node_count(k) {
            slice.clear();
            slice.resize(tree.atom_count(k), None);
            for vt in 0..alpha.nodes {
                if tree.node_ancestor(m, vt, k) != v {
                    continue;
                }
                for at in 0..alpha.atoms {
                    let a = tree.atom_ancestor(m, at, k);
                    let x = alpha.value(k, vt, at);
                    match slice[a] {
                        None => slice[a] = Some(x),
                        Some(y) if y == x => {}
                        Some(_) => {
                            return Err(Error::NotMeasurable(format!(
                                "flat control at step {k}, node {v} depends on noise after t_{k}"
                            )))
                        }
                    }
                }
            }
            nodes.push(DecomposedAction {
                step: k,
                values: slice.iter().map(|x| x.expect("every atom visited")).collect(),
            });
        }
        per_step.push(nodes);
    }
    Ok(DecomposedControl { per_step })
}

pub fn identify_decomposed_to_flat(tree: &ScenarioTree, ahat: &DecomposedControl) -> FlatControl {
    FlatControl::adapted(tree, |k, v, a| ahat.action(k, v, a))
}

/// Either kind of control, for [`control_distance`].
#[derive(Debug, Clone, Copy)]
pub enum ControlRef<'a> {
    Flat(&'a FlatControl),
    Decomposed(&'a DecomposedControl),
}

/// `d_𝒜` for flat pairs, `d_𝒜̂` for decomposed pairs.
pub fn control_distance(
    tree: &ScenarioTree,
    actions: &ActionSet,
    c1: ControlRef,
    c2: ControlRef,
) -> Result<f64> {
    match (c1, c2) {
        (ControlRef::Flat(a), ControlRef::Flat(b)) => Ok(flat_distance(tree, actions, a, b)),
        (ControlRef::Decomposed(a), ControlRef::Decomposed(b)) => {
            decomposed_distance(tree, actions, a, b)
        }
        _ => Err(Error::InvalidControl(
            "distance between a flat and a decomposed control".into(),
        )),
    }
}

/// `E ∫ ρ(α¹_s, α²_s) ds` with grid quadrature.
pub fn flat_distance(
    tree: &ScenarioTree,
    actions: &ActionSet,
    a: &FlatControl,
    b: &FlatControl,
) -> f64 {
    let m = tree.steps();
    let w = &tree.atoms(m).weight;
    let mut total = 0.0;
    for k in 0..m {
        let mut step_sum = 0.0;
        for v in 0..a.nodes {
            let p = tree.node_prob(m, v);
            let mut node_sum = 0.0;
            for (at, wa) in w.iter().enumerate() {
                node_sum += wa * actions.rho(a.value(k, v, at), b.value(k, v, at));
            }
            step_sum += p * node_sum;
        }
        total += tree.grid().dt(k) * step_sum;
    }
    total
}

/// `E ∫ ρ̂(α̂¹_s, α̂²_s) ds` with grid quadrature.
pub fn decomposed_distance(
    tree: &ScenarioTree,
    actions: &ActionSet,
    a: &DecomposedControl,
    b: &DecomposedControl,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..tree.steps() {
        let mut step_sum = 0.0;
        for v in 0..tree.node_count(k) {
            step_sum += tree.node_prob(k, v) * rho_hat(tree, actions, a.at(k, v), b.at(k, v))?;
        }
        total += tree.grid().dt(k) * step_sum;
    }
    Ok(total)
}

/// All of `𝒜_{t_step}`: every map from step atoms to actions, in
/// lexicographic order (first atom most significant).
pub fn enumerate_action_space(
    tree: &ScenarioTree,
    step: usize,
    n_actions: usize,
    cap: usize,
) -> Result<Vec<DecomposedAction>> {
    let atoms = tree.atom_count(step);
    let count = u32::try_from(atoms)
        .ok()
        .and_then(|e| n_actions.checked_pow(e))
        .unwrap_or(usize::MAX);
    if count > cap {
        return Err(Error::TooLarge {
            what: format!("action space at step {step}"),
            needed: count,
            budget: cap,
        });
    }
    let mut out = Vec::with_capacity(count);
    for mut code in 0..count {
        let mut values = vec![0; atoms];
        for slot in values.iter_mut().rev() {
            *slot = code % n_actions;
            code /= n_actions;
        }
        out.push(DecomposedAction { step, values });
    }
    Ok(out)
}

/// The discretised `𝒜_T` used as mark space: every decomposed action at the
/// last control step, ordered by birth so that `𝒜_{t_k}` is the id range
/// `0..count(k)`.
#[derive(Debug, Clone)]
pub struct MarkCatalog {
    last: usize,
    marks: Vec<DecomposedAction>,
    birth: Vec<usize>,
    counts: Vec<usize>,
    /// `restricted[k][mark * atoms_k + atom]` for marks born by `k`.
    restricted: Vec<Vec<usize>>,
    atoms: Vec<usize>,
    n_actions: usize,
}

pub type MarkId = usize;

impl MarkCatalog {
    pub fn build(tree: &ScenarioTree, n_actions: usize, cap: usize) -> Result<Self> {
        if tree.steps() == 0 {
            return Err(Error::InvalidGrid("no control steps".into()));
        }
        let last = tree.steps() - 1;
        let all = enumerate_action_space(tree, last, n_actions, cap)?;
        let mut tagged: Vec<(usize, DecomposedAction)> =
            all.into_iter().map(|a| (a.birth(tree), a)).collect();
        tagged.sort_by(|x, y| x.0.cmp(&y.0));
        let birth: Vec<usize> = tagged.iter().map(|t| t.0).collect();
        let marks: Vec<DecomposedAction> = tagged.into_iter().map(|t| t.1).collect();
        let counts: Vec<usize> = (0..=last)
            .map(|k| birth.iter().filter(|b| **b <= k).count())
            .collect();
        let atoms: Vec<usize> = (0..=last).map(|k| tree.atom_count(k)).collect();
        let restricted = (0..=last)
            .map(|k| {
                let block = tree.w_branching().pow((last - k) as u32);
                let mut table = Vec::with_capacity(counts[k] * atoms[k]);
                for mark in &marks[..counts[k]] {
                    table.extend(mark.values.iter().step_by(block).copied());
                }
                table
            })
            .collect();
        Ok(Self {
            last,
            marks,
            birth,
            counts,
            restricted,
            atoms,
            n_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of control steps covered (`M`).
    pub fn steps(&self) -> usize {
        self.last + 1
    }

    pub fn mark(&self, id: MarkId) -> &DecomposedAction {
        &self.marks[id]
    }

    pub fn birth(&self, id: MarkId) -> usize {
        self.birth[id]
    }

    /// `|𝒜_{t_k}|`; the marks measurable at `k` are ids `0..count(k)`.
    pub fn count(&self, k: usize) -> usize {
        self.counts[k.min(self.last)]
    }

    /// Action of `mark` on step-`k` atom `atom`; requires `birth(mark) <= k`.
    #[inline]
    pub fn action(&self, k: usize, mark: MarkId, atom: usize) -> usize {
        let k = k.min(self.last);
        debug_assert!(self.birth[mark] <= k);
        self.restricted[k][mark * self.atoms[k] + atom]
    }

    /// The mark restricted to the step-`k` atoms.
    pub fn restricted(&self, k: usize, mark: MarkId) -> &[usize] {
        let k = k.min(self.last);
        &self.restricted[k][mark * self.atoms[k]..(mark + 1) * self.atoms[k]]
    }

    pub fn as_action(&self, tree: &ScenarioTree, k: usize, mark: MarkId) -> Result<DecomposedAction> {
        if self.birth[mark] > k {
            return Err(Error::NotMeasurable(format!(
                "mark {mark} is born at step {} > {k}",
                self.birth[mark]
            )));
        }
        DecomposedAction::new(tree, k, self.restricted(k, mark).to_vec())
    }

    /// Id of a decomposed action measurable at its own step.
    pub fn find(&self, tree: &ScenarioTree, action: &DecomposedAction) -> Option<MarkId> {
        let lifted = action.lift(tree, self.last);
        self.marks.iter().position(|m| *m == lifted)
    }
}

/// `λ_k`, one mass per catalog mark, for the control steps `k = 0..M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaFamily {
    masses: Vec<Vec<f64>>,
    totals: Vec<f64>,
}

/// Default `κ` constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaKind {
    /// `κ_{t_k}` spreads its mass over the actions first measurable at `t_k`.
    UniformNew,
    /// `κ_{t_k}` spreads its mass over all of `𝒜_{t_k}`.
    UniformFull,
}

impl KappaKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "uniform-new" => Ok(KappaKind::UniformNew),
            "uniform-full" => Ok(KappaKind::UniformFull),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

/// `λ_k = Σ_{s_n ≤ t_k} 2^{-n} κ_{s_n}` with `n` counted from 1 in list order.
pub fn build_lambda_family(
    catalog: &MarkCatalog,
    kappas: &[(usize, Vec<f64>)],
) -> Result<LambdaFamily> {
    let steps = catalog.steps();
    let mut masses = vec![vec![0.0; catalog.len()]; steps];
    for (n, (s, kappa)) in kappas.iter().enumerate() {
        if kappa.len() != catalog.len() {
            return Err(Error::Lambda(format!(
                "κ number {} has {} masses for {} marks",
                n + 1,
                kappa.len(),
                catalog.len()
            )));
        }
        if *s >= steps {
            return Err(Error::Lambda(format!("κ at step {s} beyond the last control step")));
        }
        for (id, &x) in kappa.iter().enumerate() {
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::Lambda(format!("κ mass {x} for mark {id}")));
            }
            if x > 0.0 && catalog.birth(id) > *s {
                return Err(Error::Lambda(format!(
                    "κ at step {s} charges mark {id}, which is only measurable from step {}",
                    catalog.birth(id)
                )));
            }
        }
        let weight = 0.5f64.powi(n as i32 + 1);
        for row in masses.iter_mut().skip(*s) {
            for (m, x) in row.iter_mut().zip(kappa) {
                *m += weight * x;
            }
        }
    }
    let totals = masses.iter().map(|r| r.iter().sum()).collect();
    let family = LambdaFamily { masses, totals };
    family.check_conditions(catalog)?;
    Ok(family)
}

/// One `κ` per step carrying `total_mass`.
pub fn default_lambda_family(
    catalog: &MarkCatalog,
    kind: KappaKind,
    total_mass: f64,
) -> Result<LambdaFamily> {
    if !(total_mass > 0.0) || !total_mass.is_finite() {
        return Err(Error::Lambda(format!("total mass {total_mass}")));
    }
    let mut kappas = Vec::new();
    for k in 0..catalog.steps() {
        let lo = if k == 0 { 0 } else { catalog.count(k - 1) };
        let (from, to) = match kind {
            KappaKind::UniformNew => (lo, catalog.count(k)),
            KappaKind::UniformFull => (0, catalog.count(k)),
        };
        if from == to {
            continue;
        }
        let per = total_mass / (to - from) as f64;
        let mut kappa = vec![0.0; catalog.len()];
        kappa[from..to].iter_mut().for_each(|x| *x = per);
        kappas.push((k, kappa));
    }
    build_lambda_family(catalog, &kappas)
}

impl LambdaFamily {
    pub fn steps(&self) -> usize {
        self.masses.len()
    }

    #[inline]
    pub fn mass(&self, k: usize, mark: MarkId) -> f64 {
        self.masses[k][mark]
    }

    pub fn masses(&self, k: usize) -> &[f64] {
        &self.masses[k]
    }

    /// `λ_k(𝒜_T)`.
    pub fn total(&self, k: usize) -> f64 {
        self.totals[k]
    }

    pub fn max_total(&self) -> f64 {
        self.totals.iter().copied().fold(0.0, f64::max)
    }

    pub fn support(&self, k: usize) -> Vec<MarkId> {
        (0..self.masses[k].len())
            .filter(|&i| self.masses[k][i] > 0.0)
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            masses: self
                .masses
                .iter()
                .map(|r| r.iter().map(|x| x * factor).collect())
                .collect(),
            totals: self.totals.iter().map(|t| t * factor).collect(),
        }
    }

    /// A family with arbitrary masses, bypassing all checks. Only meant for
    /// degenerate test set-ups such as an identically zero intensity.
    pub fn unchecked(masses: Vec<Vec<f64>>) -> Self {
        let totals = masses.iter().map(|r| r.iter().sum()).collect();
        Self { masses, totals }
    }

    /// (C1) `supp λ_k = 𝒜_{t_k}`; (C2) supports increase and densities stay
    /// positive, so `λ_j ≪ λ_k`; (C3) finite total masses.
    pub fn check_conditions(&self, catalog: &MarkCatalog) -> Result<()> {
        for k in 0..self.steps() {
            let support = self.support(k);
            let expected: Vec<MarkId> = (0..catalog.count(k)).collect();
            if support != expected {
                return Err(Error::Lambda(format!(
                    "C1 fails at step {k}: support has {} marks, 𝒜_t has {}",
                    support.len(),
                    expected.len()
                )));
            }
            if k > 0 {
                for &i in &self.support(k - 1) {
                    if !(self.masses[k][i] > 0.0) {
                        return Err(Error::Lambda(format!(
                            "C2 fails: λ_{} charges mark {i} but λ_{k} does not",
                            k - 1
                        )));
                    }
                }
            }
            if !self.totals[k].is_finite() {
                return Err(Error::Lambda(format!("C3 fails at step {k}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AtomSpace, NoiseLattice, TimeGrid};
    use proptest::prelude::*;

    fn tree(steps: usize, roots: &[f64]) -> ScenarioTree {
        ScenarioTree::build(
            TimeGrid::uniform(1.0, steps).unwrap(),
            NoiseLattice::binary(1),
            NoiseLattice::binary(1),
            AtomSpace::from_weights(roots).unwrap(),
        )
        .unwrap()
    }

    fn two_actions(rho: f64) -> ActionSet {
        ActionSet::discrete(vec![vec![-1.0], vec![1.0]], rho).unwrap()
    }

    #[test]
    fn rho_hat_examples() {
        let t = tree(1, &[0.5, 0.5]);
        let acts = two_actions(0.9);
        let a = DecomposedAction::new(&t, 0, vec![0, 1]).unwrap();
        let b = DecomposedAction::new(&t, 0, vec![0, 0]).unwrap();
        assert_eq!(rho_hat(&t, &acts, &a, &a).unwrap(), 0.0);
        assert!((rho_hat(&t, &acts, &a, &b).unwrap() - 0.45).abs() < 1e-15);

        let t = tree(1, &[0.3, 0.7]);
        let acts = two_actions(0.5);
        let a = DecomposedAction::new(&t, 0, vec![0, 1]).unwrap();
        let b = DecomposedAction::new(&t, 0, vec![0, 0]).unwrap();
        assert!((rho_hat(&t, &acts, &a, &b).unwrap() - 0.35).abs() < 1e-15);

        let c = DecomposedAction::constant(&t, 1, 0);
        assert!(rho_hat(&t, &acts, &a, &c).is_err());
    }

    #[test]
    fn action_set_validation() {
        assert!(ActionSet::discrete(vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(ActionSet::new(vec![vec![0.0], vec![1.0]], vec![0.0, 0.5, 0.4, 0.0]).is_err());
        let bad_triangle = vec![0.0, 0.1, 0.9, 0.1, 0.0, 0.1, 0.9, 0.1, 0.0];
        assert!(ActionSet::new(vec![vec![0.0], vec![1.0], vec![2.0]], bad_triangle).is_err());
        let e = ActionSet::bounded_euclidean(vec![vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert!((e.rho(0, 1) - 0.5).abs() < 1e-15);
        assert!(e.sup_rho() < 1.0);
    }

    #[test]
    fn enumeration_counts_and_nesting() {
        let t = tree(2, &[1.0]);
        assert_eq!(enumerate_action_space(&t, 0, 2, 4096).unwrap().len(), 2);
        let t2 = tree(2, &[0.5, 0.5]);
        assert_eq!(enumerate_action_space(&t2, 0, 2, 4096).unwrap().len(), 4);
        let s1 = enumerate_action_space(&t2, 1, 2, 4096).unwrap();
        for a in enumerate_action_space(&t2, 0, 2, 4096).unwrap() {
            assert!(s1.contains(&a.lift(&t2, 1)));
        }
        assert!(matches!(
            enumerate_action_space(&t2, 2, 2, 100),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn constant_and_atom_only_controls() {
        let t = tree(2, &[0.5, 0.5]);
        let flat = FlatControl::from_fn(&t, |_, _, _| 1);
        let dec = identify_flat_to_decomposed(&t, &flat).unwrap();
        assert_eq!(dec, DecomposedControl::constant(&t, 1));

        let m = t.steps();
        let flat = FlatControl::from_fn(&t, |_, _, a| t.atoms(m).root[a]);
        let dec = identify_flat_to_decomposed(&t, &flat).unwrap();
        for k in 0..m {
            for v in 1..t.node_count(k) {
                assert_eq!(dec.at(k, v), dec.at(k, 0));
            }
        }
    }

    #[test]
    fn non_adapted_flat_control_rejected() {
        let t = tree(2, &[0.5, 0.5]);
        // Uses the terminal node at step 0.
        let flat = FlatControl::from_fn(&t, |_, v, _| v % 2);
        assert!(matches!(
            identify_flat_to_decomposed(&t, &flat),
            Err(Error::NotMeasurable(_))
        ));
        // Uses the terminal W increment at step 1.
        let flat = FlatControl::from_fn(&t, |k, _, a| if k == 1 { a % 2 } else { 0 });
        assert!(identify_flat_to_decomposed(&t, &flat).is_err());
    }

    #[test]
    fn hand_enumerated_distances_on_two_nodes() {
        // One step, two root atoms (0.5, 0.5), binary B: the control at step 0
        // lives on the single root node, so use two steps and vary at step 1.
        let t = tree(2, &[0.5, 0.5]);
        let acts = two_actions(0.9);
        // α: action 1 everywhere except node 1 at step 1, atom-root 0.
        let alpha = FlatControl::adapted(&t, |k, v, a| {
            if k == 1 && v == 1 && t.atoms(1).root[a] == 0 {
                0
            } else {
                1
            }
        });
        let beta = FlatControl::adapted(&t, |_, _, _| 1);
        // Difference only on step 1 (Δ = 1/2), node 1 (prob 1/2), root atom 0
        // (weight 1/2): 0.5 · 0.5 · 0.5 · 0.9.
        let expected = 0.5 * 0.5 * 0.5 * 0.9;
        let d_flat = flat_distance(&t, &acts, &alpha, &beta);
        assert!((d_flat - expected).abs() < 1e-15);
        let ah = identify_flat_to_decomposed(&t, &alpha).unwrap();
        let bh = identify_flat_to_decomposed(&t, &beta).unwrap();
        assert!((decomposed_distance(&t, &acts, &ah, &bh).unwrap() - expected).abs() < 1e-15);
        assert_eq!(identify_decomposed_to_flat(&t, &ah), alpha);
    }

    #[test]
    fn constant_controls_distance() {
        let t = tree(3, &[1.0]);
        let acts = two_actions(0.9);
        let a = DecomposedControl::constant(&t, 0);
        let b = DecomposedControl::constant(&t, 1);
        let d = control_distance(&t, &acts, ControlRef::Decomposed(&a), ControlRef::Decomposed(&b))
            .unwrap();
        assert!((d - 0.9).abs() < 1e-15);
        let fa = identify_decomposed_to_flat(&t, &a);
        assert!(control_distance(&t, &acts, ControlRef::Flat(&fa), ControlRef::Decomposed(&b)).is_err());
        assert_eq!(
            control_distance(&t, &acts, ControlRef::Flat(&fa), ControlRef::Flat(&fa)).unwrap(),
            0.0
        );
    }

    #[test]
    fn catalog_orders_by_birth() {
        let t = tree(3, &[0.5, 0.5]);
        let cat = MarkCatalog::build(&t, 2, 4096).unwrap();
        assert_eq!(cat.len(), 256);
        assert_eq!(cat.count(0), 4);
        assert_eq!(cat.count(1), 16);
        assert_eq!(cat.count(2), 256);
        for id in 0..cat.len() {
            let b = cat.birth(id);
            assert!(id < cat.count(b));
            assert!(b == 0 || id >= cat.count(b - 1));
            let act = cat.as_action(&t, 2, id).unwrap();
            assert_eq!(cat.find(&t, &act), Some(id));
        }
        assert!(cat.as_action(&t, 0, 200).is_err());
    }

    #[test]
    fn lambda_examples() {
        let t = tree(2, &[1.0]);
        let cat = MarkCatalog::build(&t, 2, 4096).unwrap();
        // 𝒜_0 has 2 marks, 𝒜_1 has 4.
        let mut k0 = vec![0.0; cat.len()];
        k0[..2].iter_mut().for_each(|x| *x = 0.5);
        let mut k1 = vec![0.0; cat.len()];
        k1.iter_mut().for_each(|x| *x = 0.25);

        // A single κ at step 0 leaves 𝒜_1 uncharged: C1 fails at step 1.
        assert!(build_lambda_family(&cat, &[(0, k0.clone())]).is_err());

        let fam = build_lambda_family(&cat, &[(0, k0.clone()), (1, k1.clone())]).unwrap();
        assert!((fam.total(0) - 0.5).abs() < 1e-15);
        assert!((fam.total(1) - 0.75).abs() < 1e-15);
        assert_eq!(fam.support(0), vec![0, 1]);
        assert_eq!(fam.support(1), vec![0, 1, 2, 3]);

        // Single-step grid: λ = κ/2.
        let t1 = tree(1, &[0.5, 0.5]);
        let cat1 = MarkCatalog::build(&t1, 2, 4096).unwrap();
        let kappa = vec![0.25; cat1.len()];
        let fam = build_lambda_family(&cat1, &[(0, kappa.clone())]).unwrap();
        for (m, x) in fam.masses(0).iter().zip(&kappa) {
            assert_eq!(*m, 0.5 * x);
        }

        // κ charging a mark that is not yet measurable.
        let mut bad = vec![0.0; cat.len()];
        bad[3] = 1.0;
        assert!(build_lambda_family(&cat, &[(0, bad), (1, k1)]).is_err());
    }

    #[test]
    fn default_families_satisfy_conditions() {
        let t = tree(3, &[0.5, 0.5]);
        let cat = MarkCatalog::build(&t, 2, 4096).unwrap();
        for kind in [KappaKind::UniformNew, KappaKind::UniformFull] {
            let fam = default_lambda_family(&cat, kind, 1.0).unwrap();
            fam.check_conditions(&cat).unwrap();
            let bound: f64 = (1..=cat.steps()).map(|n| 0.5f64.powi(n as i32)).sum();
            assert!(fam.max_total() <= bound + 1e-12);
        }
    }

    fn random_flat(t: &ScenarioTree, n_actions: usize, seed: &[usize]) -> FlatControl {
        let mut i = 0;
        let m = t.steps();
        let mut table = std::collections::HashMap::new();
        FlatControl::from_fn(t, |k, v, a| {
            let key = (k, t.node_ancestor(m, v, k), t.atom_ancestor(m, a, k));
            *table.entry(key).or_insert_with(|| {
                i += 1;
                seed[i % seed.len()] % n_actions
            })
        })
    }

    proptest! {
        #[test]
        fn identification_is_an_isometry(s1 in proptest::collection::vec(0usize..3, 1..40),
                                         s2 in proptest::collection::vec(0usize..3, 1..40)) {
            let t = tree(3, &[0.4, 0.6]);
            let acts = ActionSet::bounded_euclidean(vec![vec![-1.0], vec![0.0], vec![2.0]]).unwrap();
            let a = random_flat(&t, 3, &s1);
            let b = random_flat(&t, 3, &s2);
            let ah = identify_flat_to_decomposed(&t, &a).unwrap();
            let bh = identify_flat_to_decomposed(&t, &b).unwrap();
            let d1 = flat_distance(&t, &acts, &a, &b);
            let d2 = decomposed_distance(&t, &acts, &ah, &bh).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12);
            prop_assert_eq!(identify_decomposed_to_flat(&t, &ah), a);
        }
    }
}
