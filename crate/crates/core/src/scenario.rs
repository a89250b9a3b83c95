//! Finite filtered probability model.
//!
//! A [`ScenarioTree`] discretises the idiosyncratic randomness (the σ-algebra of
//! initial atoms together with the path of `W`) and the common noise `B` on a
//! time grid. Common-noise histories form a regular tree of nodes; the
//! idiosyncratic part at step `k` is a flat list of atoms, one per
//! (initial atom, `W`-increment path). Because `W` and the initial atoms are
//! independent of `B`, every node at step `k` carries the same atom weights.
//!
//! Indexing is structural: the `j`-th child of node `v` is `v * nb + j` and the
//! `j`-th refinement of atom `a` is `a * nw + j`. Measurability at step `k` is
//! therefore decided by prefix (ancestor) equality.

use serde::Serialize;

use crate::error::{Error, Result};

/// Default cap on `Σ_k nodes_k · atoms_k`.
pub const DEFAULT_BUDGET: usize = 1_000_000;

const MOMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.first().copied() != Some(0.0) {
            return Err(Error::InvalidGrid("first time must be 0".into()));
        }
        Self::starting_anywhere(times)
    }

    /// `steps` equal cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "need steps >= 1 and a positive horizon, got {steps} steps on {horizon}"
            )));
        }
        let mut times: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        times[steps] = horizon;
        Self::new(times)
    }

    fn starting_anywhere(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidGrid("times must be finite and nonnegative".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("times must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    /// The grid from step `from` onwards; the first time is `t_from`, not 0.
    pub fn suffix(&self, from: usize) -> Result<Self> {
        if from >= self.steps() {
            return Err(Error::InvalidGrid(format!(
                "cannot restart at step {from} of a {}-step grid",
                self.steps()
            )));
        }
        Self::starting_anywhere(self.times[from..].to_vec())
    }

    /// Number of cells `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Index `k` of the cell `(t_k, t_{k+1}]` containing `t`.
    pub fn cell_of(&self, t: f64) -> Option<usize> {
        if t <= self.start() || t > self.horizon() {
            return None;
        }
        let idx = self.times.partition_point(|s| *s < t);
        Some(idx - 1)
    }

    /// Step index of a time lying exactly on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (*s - t).abs() <= 1e-12)
    }
}

/// Per-step increment support of a Brownian motion, stored for unit time.
///
/// Increments over a cell of length `dt` are the unit increments scaled by
/// `sqrt(dt)`, so mean zero and covariance `dt · I` hold on every cell when
/// they hold here.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLattice {
    dim: usize,
    increments: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl NoiseLattice {
    pub fn new(dim: usize, support: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidLattice("empty support".into()));
        }
        let mut increments = Vec::with_capacity(support.len());
        let mut probs = Vec::with_capacity(support.len());
        for (inc, p) in support {
            if inc.len() != dim {
                return Err(Error::InvalidLattice(format!(
                    "increment of length {} in a {dim}-dimensional lattice",
                    inc.len()
                )));
            }
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::InvalidLattice(format!("nonpositive probability {p}")));
            }
            increments.push(inc);
            probs.push(p);
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MOMENT_TOL {
            return Err(Error::InvalidLattice(format!("probabilities sum to {total}")));
        }
        for i in 0..dim {
            let mean: f64 = increments.iter().zip(&probs).map(|(x, p)| p * x[i]).sum();
            if mean.abs() > MOMENT_TOL {
                return Err(Error::InvalidLattice(format!("component {i} has mean {mean}")));
            }
            for j in 0..dim {
                let cov: f64 = increments
                    .iter()
                    .zip(&probs)
                    .map(|(x, p)| p * x[i] * x[j])
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (cov - target).abs() > MOMENT_TOL {
                    return Err(Error::InvalidLattice(format!(
                        "covariance entry ({i},{j}) is {cov}, expected {target} per unit time"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            increments,
            probs,
        })
    }

    /// `±1` per coordinate, all sign patterns equally likely.
    pub fn binary(dim: usize) -> Self {
        Self::product(dim, &[(-1.0, 0.5), (1.0, 0.5)])
    }

    /// `{-√3, 0, √3}` per coordinate with probabilities `(1/6, 2/3, 1/6)`.
    pub fn trinomial(dim: usize) -> Self {
        let s = 3f64.sqrt();
        Self::product(dim, &[(-s, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s, 1.0 / 6.0)])
    }

    /// A zero-dimensional lattice: the noise is absent.
    pub fn none() -> Self {
        Self {
            dim: 0,
            increments: vec![Vec::new()],
            probs: vec![1.0],
        }
    }

    fn product(dim: usize, marginal: &[(f64, f64)]) -> Self {
        let mut support: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
        for _ in 0..dim {
            support = support
                .into_iter()
                .flat_map(|(inc, p)| {
                    marginal.iter().map(move |(x, q)| {
                        let mut next = inc.clone();
                        next.push(*x);
                        (next, p * q)
                    })
                })
                .collect();
        }
        Self::new(dim, support).expect("product lattices match two moments")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn branching(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.probs[j]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn unit_increment(&self, j: usize) -> &[f64] {
        &self.increments[j]
    }

    /// Increment `j` over a cell of length `dt`.
    pub fn increment(&self, j: usize, dt: f64) -> Vec<f64> {
        let s = dt.sqrt();
        self.increments[j].iter().map(|x| x * s).collect()
    }

    /// Largest Euclidean norm among unit increments.
    pub fn max_unit_norm(&self) -> f64 {
        self.increments
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpace {
    labels: Vec<String>,
    probs: Vec<f64>,
}

impl AtomSpace {
    pub fn new(atoms: Vec<(String, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidAtoms("no atoms".into()));
        }
        let mut labels = Vec::with_capacity(atoms.len());
        let mut probs = Vec::with_capacity(atoms.len());
        for (label, p) in atoms {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::InvalidAtoms(format!("atom `{label}` has probability {p}")));
            }
            if labels.contains(&label) {
                return Err(Error::InvalidAtoms(format!("duplicate label `{label}`")));
            }
            labels.push(label);
            probs.push(p);
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MOMENT_TOL {
            return Err(Error::InvalidAtoms(format!("probabilities sum to {total}")));
        }
        Ok(Self { labels, probs })
    }

    /// Atoms `g0, g1, …` with the given weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        Self::new(
            weights
                .iter()
                .enumerate()
                .map(|(i, w)| (format!("g{i}"), *w))
                .collect(),
        )
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Idiosyncratic atoms at one grid step.
#[derive(Debug, Clone)]
pub struct AtomLevel {
    /// Root atom each atom descends from.
    pub root: Vec<usize>,
    /// Parent atom at the previous step (empty at step 0).
    pub parent: Vec<usize>,
    /// Index of the `W` increment leading here (empty at step 0).
    pub w_edge: Vec<usize>,
    pub weight: Vec<f64>,
}

impl AtomLevel {
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
    w: NoiseLattice,
    b: NoiseLattice,
    roots: AtomSpace,
    atoms: Vec<AtomLevel>,
    /// Unconditional probability of each common node, per step.
    node_prob: Vec<Vec<f64>>,
}

impl ScenarioTree {
    pub fn build(
        grid: TimeGrid,
        w: NoiseLattice,
        b: NoiseLattice,
        roots: AtomSpace,
    ) -> Result<Self> {
        Self::build_with_budget(grid, w, b, roots, DEFAULT_BUDGET)
    }

    pub fn build_with_budget(
        grid: TimeGrid,
        w: NoiseLattice,
        b: NoiseLattice,
        roots: AtomSpace,
        budget: usize,
    ) -> Result<Self> {
        let steps = grid.steps();
        let (nw, nb) = (w.branching(), b.branching());
        let mut needed: usize = 0;
        for k in 0..=steps {
            let nodes = checked_pow(nb, k);
            let atoms = checked_pow(nw, k).and_then(|x| x.checked_mul(roots.len()));
            match nodes.and_then(|n| atoms.and_then(|a| n.checked_mul(a))) {
                Some(entries) => needed = needed.saturating_add(entries),
                None => needed = usize::MAX,
            }
        }
        if needed > budget {
            return Err(Error::TooLarge {
                what: "scenario tree".into(),
                needed,
                budget,
            });
        }

        let mut atoms = Vec::with_capacity(steps + 1);
        atoms.push(AtomLevel {
            root: (0..roots.len()).collect(),
            parent: Vec::new(),
            w_edge: Vec::new(),
            weight: roots.probs().to_vec(),
        });
        for _ in 0..steps {
            let prev = atoms.last().expect("level 0 exists");
            let mut next = AtomLevel {
                root: Vec::with_capacity(prev.len() * nw),
                parent: Vec::with_capacity(prev.len() * nw),
                w_edge: Vec::with_capacity(prev.len() * nw),
                weight: Vec::with_capacity(prev.len() * nw),
            };
            for a in 0..prev.len() {
                for j in 0..nw {
                    next.root.push(prev.root[a]);
                    next.parent.push(a);
                    next.w_edge.push(j);
                    next.weight.push(prev.weight[a] * w.prob(j));
                }
            }
            atoms.push(next);
        }

        let mut node_prob = vec![vec![1.0]];
        for _ in 0..steps {
            let prev = node_prob.last().expect("root exists");
            let next = prev
                .iter()
                .flat_map(|p| b.probs().iter().map(move |q| p * q))
                .collect();
            node_prob.push(next);
        }

        Ok(Self {
            grid,
            w,
            b,
            roots,
            atoms,
            node_prob,
        })
    }

    /// The problem restarted at `step`: its root atoms are this tree's atoms at
    /// `step` with their weights, and its grid is the suffix from `t_step`.
    pub fn restart(&self, step: usize) -> Result<Self> {
        let grid = self.grid.suffix(step)?;
        let level = &self.atoms[step];
        let roots = AtomSpace::new(
            (0..level.len())
                .map(|a| (self.atom_label(step, a), level.weight[a]))
                .collect(),
        )
        .or_else(|_| {
            // Products of weights may drift from 1 by a few ulps.
            let total: f64 = level.weight.iter().sum();
            AtomSpace::new(
                (0..level.len())
                    .map(|a| (self.atom_label(step, a), level.weight[a] / total))
                    .collect(),
            )
        })?;
        Self::build_with_budget(grid, self.w.clone(), self.b.clone(), roots, usize::MAX)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn w_lattice(&self) -> &NoiseLattice {
        &self.w
    }

    pub fn b_lattice(&self) -> &NoiseLattice {
        &self.b
    }

    pub fn root_atoms(&self) -> &AtomSpace {
        &self.roots
    }

    pub fn atoms(&self, step: usize) -> &AtomLevel {
        &self.atoms[step]
    }

    pub fn atom_count(&self, step: usize) -> usize {
        self.atoms[step].len()
    }

    pub fn node_count(&self, step: usize) -> usize {
        self.node_prob[step].len()
    }

    pub fn node_prob(&self, step: usize, node: usize) -> f64 {
        self.node_prob[step][node]
    }

    pub fn b_branching(&self) -> usize {
        self.b.branching()
    }

    pub fn w_branching(&self) -> usize {
        self.w.branching()
    }

    /// Children of `node` at `step`, as (child index, edge probability).
    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let nb = self.b.branching();
        (0..nb).map(move |e| (node * nb + e, self.b.prob(e)))
    }

    pub fn node_parent(&self, node: usize) -> usize {
        node / self.b.branching()
    }

    pub fn node_edge(&self, node: usize) -> usize {
        node % self.b.branching()
    }

    /// Ancestor at step `to` of `node` at step `from` (`to <= from`).
    pub fn node_ancestor(&self, from: usize, node: usize, to: usize) -> usize {
        debug_assert!(to <= from);
        node / self.b.branching().pow((from - to) as u32)
    }

    /// Ancestor at step `to` of `atom` at step `from` (`to <= from`).
    pub fn atom_ancestor(&self, from: usize, atom: usize, to: usize) -> usize {
        debug_assert!(to <= from);
        atom / self.w.branching().pow((from - to) as u32)
    }

    /// Structural label: root label plus the `W`-increment path.
    pub fn atom_label(&self, step: usize, atom: usize) -> String {
        let mut path = Vec::with_capacity(step);
        let mut a = atom;
        for k in (1..=step).rev() {
            path.push(self.atoms[k].w_edge[a]);
            a = self.atoms[k].parent[a];
        }
        path.reverse();
        let root = self.roots.label(a);
        if path.is_empty() {
            root.to_string()
        } else {
            let steps: Vec<String> = path.iter().map(|j| j.to_string()).collect();
            format!("{root}|w:{}", steps.join(","))
        }
    }

    /// Exact conditional expectation of an atom payoff at a node.
    pub fn cond_expect(&self, step: usize, node: usize, payoff: &[f64]) -> Result<f64> {
        if node >= self.node_count(step) {
            return Err(Error::Precondition(format!("no node {node} at step {step}")));
        }
        let level = &self.atoms[step];
        if payoff.len() != level.len() {
            return Err(Error::MissingAtom {
                step,
                expected: level.len(),
                got: payoff.len(),
            });
        }
        Ok(level.weight.iter().zip(payoff).map(|(w, x)| w * x).sum())
    }

    /// Conditional expectation at `node` (step `step`) of a payoff on the next
    /// step's (child node, atom) pairs.
    pub fn cond_expect_next(
        &self,
        step: usize,
        node: usize,
        payoff: impl Fn(usize, usize) -> f64,
    ) -> f64 {
        let level = &self.atoms[step + 1];
        self.children(node)
            .map(|(child, p)| {
                p * level
                    .weight
                    .iter()
                    .enumerate()
                    .map(|(a, w)| w * payoff(child, a))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn summary(&self) -> TreeSummary {
        TreeSummary {
            steps: (0..=self.steps())
                .map(|k| StepSummary {
                    step: k,
                    time: self.grid.time(k),
                    nodes: self.node_count(k),
                    atoms: self.atom_count(k),
                    node_prob_sum: self.node_prob[k].iter().sum(),
                    atom_weight_sum: self.atoms[k].weight.iter().sum(),
                })
                .collect(),
            root_atoms: (0..self.roots.len())
                .map(|i| (self.roots.label(i).to_string(), self.roots.prob(i)))
                .collect(),
        }
    }
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    base.checked_pow(u32::try_from(exp).ok()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeSummary {
    pub steps: Vec<StepSummary>,
    pub root_atoms: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub time: f64,
    pub nodes: usize,
    pub atoms: usize,
    pub node_prob_sum: f64,
    pub atom_weight_sum: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_tree(times: Vec<f64>) -> ScenarioTree {
        ScenarioTree::build(
            TimeGrid::new(times).unwrap(),
            NoiseLattice::binary(1),
            NoiseLattice::binary(1),
            AtomSpace::uniform(2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn counts_one_step() {
        let tree = small_tree(vec![0.0, 1.0]);
        assert_eq!(tree.node_count(0), 1);
        assert_eq!(tree.node_count(1), 2);
        assert_eq!(tree.atom_count(0), 2);
        assert_eq!(tree.atom_count(1), 4);
    }

    #[test]
    fn counts_two_steps() {
        let tree = small_tree(vec![0.0, 0.5, 1.0]);
        let total: usize = (0..=2).map(|k| tree.node_count(k)).sum();
        assert_eq!(total, 7);
        assert_eq!(tree.atom_count(2), 8);
    }

    #[test]
    fn degenerate_lattice_rejected() {
        assert!(NoiseLattice::new(1, vec![(vec![0.0], 1.0)]).is_err());
        assert!(NoiseLattice::new(1, vec![(vec![1.0], 0.5), (vec![-1.0], -0.5)]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn trinomial_matches_moments() {
        let lat = NoiseLattice::trinomial(2);
        assert_eq!(lat.branching(), 9);
    }

    #[test]
    fn budget_enforced() {
        let err = ScenarioTree::build_with_budget(
            TimeGrid::uniform(1.0, 10).unwrap(),
            NoiseLattice::binary(1),
            NoiseLattice::binary(1),
            AtomSpace::uniform(2).unwrap(),
            1000,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
    }

    #[test]
    fn cond_expect_examples() {
        let tree = small_tree(vec![0.0, 1.0]);
        assert_eq!(tree.cond_expect(1, 0, &[3.0; 4]).unwrap(), 3.0);
        assert_eq!(tree.cond_expect(1, 1, &[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.25);
        let uneven = ScenarioTree::build(
            TimeGrid::new(vec![0.0, 1.0]).unwrap(),
            NoiseLattice::binary(1),
            NoiseLattice::binary(1),
            AtomSpace::from_weights(&[0.3, 0.7]).unwrap(),
        )
        .unwrap();
        let v = uneven.cond_expect(0, 0, &[1.0, -1.0]).unwrap();
        assert!((v + 0.4).abs() < 1e-15);
        assert!(matches!(
            tree.cond_expect(1, 0, &[1.0; 3]),
            Err(Error::MissingAtom { .. })
        ));
    }

    #[test]
    fn labels_are_structural() {
        let tree = small_tree(vec![0.0, 0.5, 1.0]);
        assert_eq!(tree.atom_label(0, 1), "g1");
        assert_eq!(tree.atom_label(2, 5), "g1|w:0,1");
        let restarted = tree.restart(1).unwrap();
        assert_eq!(restarted.root_atoms().len(), 4);
        assert_eq!(restarted.steps(), 1);
        assert_eq!(restarted.grid().start(), 0.5);
    }

    #[test]
    fn cell_lookup() {
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(grid.cell_of(0.3), Some(0));
        assert_eq!(grid.cell_of(0.5), Some(0));
        assert_eq!(grid.cell_of(0.7), Some(1));
        assert_eq!(grid.cell_of(0.0), None);
    }

    proptest! {
        #[test]
        fn tower_property(values in proptest::collection::vec(-10.0f64..10.0, 16 * 4)) {
            let tree = small_tree(vec![0.0, 0.25, 0.5]);
            // payoff on (node, atom) at step 2: 4 nodes × 8 atoms
            let payoff = |node: usize, atom: usize| values[node * 8 + atom];
            for v in 0..tree.node_count(0) {
                let direct: f64 = (0..tree.node_count(2))
                    .map(|n| {
                        let p = tree.node_prob(2, n);
                        p * (0..8).map(|a| tree.atoms(2).weight[a] * payoff(n, a)).sum::<f64>()
                    })
                    .sum();
                let inner = |child: usize, _atom: usize| tree.cond_expect_next(1, child, payoff);
                let nested = tree.cond_expect_next(0, v, inner);
                prop_assert!((direct - nested).abs() <= 1e-12);
            }
        }

        #[test]
        fn independence_across_nodes(values in proptest::collection::vec(-10.0f64..10.0, 8)) {
            let tree = small_tree(vec![0.0, 0.25, 0.5]);
            let first = tree.cond_expect(2, 0, &values).unwrap();
            for n in 1..tree.node_count(2) {
                prop_assert_eq!(tree.cond_expect(2, n, &values).unwrap(), first);
            }
        }
    }

    #[test]
    fn refinement_consistency() {
        let tree = small_tree(vec![0.0, 0.25, 0.5, 1.0]);
        for k in 0..tree.steps() {
            let mut children = vec![0.0; tree.atom_count(k)];
            let next = tree.atoms(k + 1);
            for a in 0..next.len() {
                children[next.parent[a]] += next.weight[a];
            }
            for (a, total) in children.iter().enumerate() {
                assert!((total - tree.atoms(k).weight[a]).abs() < 1e-15);
            }
        }
        let s = tree.summary();
        assert!((s.steps[3].atom_weight_sum - 1.0).abs() < 1e-12);
    }
}
