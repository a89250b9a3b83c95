//! Poisson randomisation of the control: marked point processes with
//! intensity `λ_s(da) ds`, the step process `Î`, intensity controls `ν` and the
//! Girsanov density `L^ν`.
//!
//! Timing convention: an event in the cell `(t_k, t_{k+1}]` carries a mark of
//! `𝒜_{t_k}` and becomes the applied action from `t_{k+1}` on. Intensities are
//! evaluated with the history at the start of the cell, so they are
//! predictable and piecewise constant, and every compensator integral is an
//! exact finite sum.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::controls::{rho_hat, ActionSet, DecomposedControl, LambdaFamily, MarkCatalog, MarkId};
use crate::error::{Error, Result};
use crate::rng::{mean_se, pick_weighted, replicate};
use crate::scenario::{ScenarioTree, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: MarkId,
}

/// Events `(τ_i, a_i)` on `(start, T]`, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarkedPointProcess {
    pub start: f64,
    pub events: Vec<Event>,
}

impl MarkedPointProcess {
    pub fn empty(start: f64) -> Self {
        Self {
            start,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks ordering and that each mark is measurable at its event time.
    pub fn validate(&self, grid: &TimeGrid, catalog: &MarkCatalog) -> Result<()> {
        let mut prev = self.start;
        for e in &self.events {
            if !(e.time > prev) || e.time > grid.horizon() {
                return Err(Error::InvalidControl(format!(
                    "event at {} out of order or outside ({}, {}]",
                    e.time,
                    self.start,
                    grid.horizon()
                )));
            }
            prev = e.time;
            let cell = grid
                .cell_of(e.time)
                .ok_or_else(|| Error::InvalidControl(format!("event at {}", e.time)))?;
            if e.mark >= catalog.len() || catalog.birth(e.mark) > cell {
                return Err(Error::NotMeasurable(format!(
                    "mark {} at time {} is not in 𝒜_t there",
                    e.mark, e.time
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Information an intensity may use at the start of cell `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct History {
    pub step: usize,
    /// Common node at `t_step`.
    pub b_node: usize,
    /// Events up to `t_step`.
    pub events: usize,
    /// Mark applied on the coming step (the initial action if no event yet).
    pub last_mark: MarkId,
    /// Node of the mark-extended tree at `t_step` (common path and applied
    /// marks on earlier steps); zero unless the intensity asks for it.
    pub tree_node: usize,
}

/// Which randomised control set an intensity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum IntensityClass {
    /// `𝒱`.
    Full,
    /// `𝒱_t`: no dependence on anything before the given step.
    FromStep(usize),
    /// `𝒱^n`: bounded by `n`.
    Capped(f64),
}

/// A bounded positive intensity `ν(step, history, mark)`.
pub trait IntensityControl: Send + Sync {
    fn intensity(&self, h: &History, mark: MarkId) -> f64;
    fn floor(&self) -> f64;
    fn ceiling(&self) -> f64;
    fn class(&self) -> IntensityClass {
        IntensityClass::Full
    }
    /// Whether [`History::tree_node`] must be tracked.
    fn uses_tree_node(&self) -> bool {
        false
    }
    /// Event counts at or above this value are not told apart, so exact
    /// evaluations may merge them.
    fn events_resolution(&self) -> usize {
        usize::MAX
    }
    fn name(&self) -> String;
}

fn checked(nu: &dyn IntensityControl, h: &History, mark: MarkId) -> Result<f64> {
    let v = nu.intensity(h, mark);
    let tol = 1e-12 * nu.ceiling().max(1.0);
    if !(v > 0.0) || !v.is_finite() || v < nu.floor() - tol || v > nu.ceiling() + tol {
        return Err(Error::Intensity(format!(
            "{} = {v} at step {} for mark {mark}, outside [{}, {}]",
            nu.name(),
            h.step,
            nu.floor(),
            nu.ceiling()
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct ConstantIntensity(pub f64);

impl IntensityControl for ConstantIntensity {
    fn intensity(&self, _h: &History, _mark: MarkId) -> f64 {
        self.0
    }
    fn floor(&self) -> f64 {
        self.0
    }
    fn ceiling(&self) -> f64 {
        self.0
    }
    fn events_resolution(&self) -> usize {
        0
    }
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }
}

/// One constant per cell.
#[derive(Debug, Clone)]
pub struct PerStepIntensity(pub Vec<f64>);

impl IntensityControl for PerStepIntensity {
    fn intensity(&self, h: &History, _mark: MarkId) -> f64 {
        self.0[h.step.min(self.0.len() - 1)]
    }
    fn floor(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
    fn ceiling(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
    fn events_resolution(&self) -> usize {
        0
    }
    fn name(&self) -> String {
        format!("per-step{:?}", self.0)
    }
}

/// `ν = lo + (hi − lo) / (1 + exp(−z))` with
/// `z = θ₀ + θ₁·min(events, 10) + θ₂·1{mark = last} + θ₃·(−1)^{b_node}`,
/// a history-dependent member of `𝒱` with values in `(lo, hi)`.
#[derive(Debug, Clone)]
pub struct LogisticIntensity {
    pub lo: f64,
    pub hi: f64,
    pub theta: [f64; 4],
}

impl IntensityControl for LogisticIntensity {
    fn intensity(&self, h: &History, mark: MarkId) -> f64 {
        let parity = if h.b_node % 2 == 0 { 1.0 } else { -1.0 };
        let z = self.theta[0]
            + self.theta[1] * h.events.min(10) as f64
            + self.theta[2] * f64::from(u8::from(mark == h.last_mark))
            + self.theta[3] * parity;
        self.lo + (self.hi - self.lo) / (1.0 + (-z).exp())
    }
    fn floor(&self) -> f64 {
        self.lo
    }
    fn ceiling(&self) -> f64 {
        self.hi
    }
    fn events_resolution(&self) -> usize {
        10
    }
    fn name(&self) -> String {
        format!("logistic[{}, {}]{:?}", self.lo, self.hi, self.theta)
    }
}

/// Values looked up by `(step, tree node, mark)`; used for the bang-bang
/// intensities built from a penalised solution.
#[derive(Debug, Clone)]
pub struct TableIntensity {
    pub label: String,
    /// `values[k][tree_node * width[k] + mark]`.
    pub values: Vec<Vec<f64>>,
    pub width: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub class: IntensityClass,
}

impl IntensityControl for TableIntensity {
    fn intensity(&self, h: &History, mark: MarkId) -> f64 {
        let k = h.step;
        if mark >= self.width[k] {
            return self.lo;
        }
        self.values[k][h.tree_node * self.width[k] + mark]
    }
    fn floor(&self) -> f64 {
        self.lo
    }
    fn ceiling(&self) -> f64 {
        self.hi
    }
    fn class(&self) -> IntensityClass {
        self.class
    }
    fn uses_tree_node(&self) -> bool {
        true
    }
    fn events_resolution(&self) -> usize {
        0
    }
    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Intensity that boosts one target mark per `(cell, common node)` and keeps
/// the floor elsewhere.
#[derive(Debug, Clone)]
pub struct BoostIntensity {
    /// `targets[k][b_node]`, `None` where no boost applies.
    pub targets: Vec<Vec<Option<MarkId>>>,
    pub boosts: Vec<Vec<f64>>,
    pub floor: f64,
}

impl IntensityControl for BoostIntensity {
    fn intensity(&self, h: &History, mark: MarkId) -> f64 {
        match self.targets.get(h.step).and_then(|t| t[h.b_node]) {
            Some(target) if target == mark => self.boosts[h.step][h.b_node],
            _ => self.floor,
        }
    }
    fn floor(&self) -> f64 {
        self.floor
    }
    fn ceiling(&self) -> f64 {
        self.boosts
            .iter()
            .flatten()
            .copied()
            .fold(self.floor, f64::max)
    }
    fn events_resolution(&self) -> usize {
        0
    }
    fn name(&self) -> String {
        "boost".into()
    }
}

/// Child index in the mark-extended tree: from `node` at step `k` with mark
/// `mark ∈ 𝒜_{t_k}` applied on step `k` and common edge `e`.
#[inline]
pub fn tree_child(catalog: &MarkCatalog, nb: usize, k: usize, node: usize, mark: MarkId, e: usize) -> usize {
    (node * catalog.count(k) + mark) * nb + e
}

/// Everything the randomisation needs about the model.
#[derive(Clone, Copy)]
pub struct Randomisation<'a> {
    pub grid: &'a TimeGrid,
    pub catalog: &'a MarkCatalog,
    pub lambda: &'a LambdaFamily,
    /// Common-noise branching (for node bookkeeping).
    pub nb: usize,
}

impl<'a> Randomisation<'a> {
    pub fn new(tree: &'a ScenarioTree, catalog: &'a MarkCatalog, lambda: &'a LambdaFamily) -> Result<Self> {
        if catalog.steps() != tree.steps() || lambda.steps() != tree.steps() {
            return Err(Error::Lambda("mark catalog and λ-family do not match the tree".into()));
        }
        Ok(Self {
            grid: tree.grid(),
            catalog,
            lambda,
            nb: tree.b_branching(),
        })
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Draws the untilted process by thinning a homogeneous process at the
    /// largest total mass.
    pub fn sample_ppp<R: Rng>(&self, rng: &mut R) -> MarkedPointProcess {
        let start = self.grid.start();
        let mut out = MarkedPointProcess::empty(start);
        let rate = self.lambda.max_total();
        if !(rate > 0.0) {
            return out;
        }
        let gap = Exp::new(rate).expect("positive rate");
        let mut t = start;
        loop {
            t += gap.sample(rng);
            if t > self.grid.horizon() {
                break;
            }
            let Some(k) = self.grid.cell_of(t) else { break };
            let total = self.lambda.total(k);
            if rng.random::<f64>() * rate < total {
                let mark = pick_weighted(rng, self.lambda.masses(k), total);
                out.events.push(Event { time: t, mark });
            }
        }
        out
    }

    /// Draws the process under the tilted intensity `ν·λ`, cell by cell, along
    /// a given common path.
    pub fn sample_tilted<R: Rng>(
        &self,
        nu: &dyn IntensityControl,
        b_edges: &[usize],
        alpha_t: MarkId,
        rng: &mut R,
    ) -> Result<MarkedPointProcess> {
        let mut out = MarkedPointProcess::empty(self.grid.start());
        let mut h = History {
            step: 0,
            b_node: 0,
            events: 0,
            last_mark: alpha_t,
            tree_node: 0,
        };
        let track = nu.uses_tree_node();
        let mut rates = vec![0.0; self.catalog.len()];
        for k in 0..self.steps() {
            h.step = k;
            let count = self.catalog.count(k);
            let mut total = 0.0;
            for (a, r) in rates.iter_mut().enumerate().take(count) {
                let lam = self.lambda.mass(k, a);
                *r = if lam > 0.0 { checked(nu, &h, a)? * lam } else { 0.0 };
                total += *r;
            }
            let dt = self.grid.dt(k);
            let n = if total * dt > 0.0 {
                Poisson::new(total * dt).expect("positive mean").sample(rng) as usize
            } else {
                0
            };
            let mut times: Vec<f64> = (0..n)
                .map(|_| self.grid.time(k) + dt * (1.0 - rng.random::<f64>()))
                .collect();
            times.sort_by(f64::total_cmp);
            let applied = h.last_mark;
            for time in times {
                let mark = pick_weighted(rng, &rates[..count], total);
                out.events.push(Event { time, mark });
                h.last_mark = mark;
            }
            h.events += n;
            if track {
                h.tree_node = tree_child(self.catalog, self.nb, k, h.tree_node, applied, b_edges[k]);
            }
            h.b_node = h.b_node * self.nb + b_edges[k];
        }
        Ok(out)
    }

    /// Histories at the start of every cell along `(B path, μ)`.
    pub fn histories(&self, mpp: &MarkedPointProcess, b_edges: &[usize], alpha_t: MarkId) -> Vec<History> {
        let mut out = Vec::with_capacity(self.steps());
        let mut h = History {
            step: 0,
            b_node: 0,
            events: 0,
            last_mark: alpha_t,
            tree_node: 0,
        };
        let mut next = 0;
        for k in 0..self.steps() {
            h.step = k;
            out.push(h);
            let applied = h.last_mark;
            let end = self.grid.time(k + 1);
            while next < mpp.events.len() && mpp.events[next].time <= end {
                h.last_mark = mpp.events[next].mark;
                h.events += 1;
                next += 1;
            }
            h.tree_node = tree_child(self.catalog, self.nb, k, h.tree_node, applied, b_edges[k]);
            h.b_node = h.b_node * self.nb + b_edges[k];
        }
        out
    }

    /// Applied mark per step: `alpha_t` until the first event is visible, then
    /// the last mark seen at each grid time.
    pub fn step_marks(&self, alpha_t: MarkId, mpp: &MarkedPointProcess) -> Result<Vec<MarkId>> {
        if alpha_t >= self.catalog.count(0) {
            return Err(Error::NotMeasurable(format!(
                "initial action {alpha_t} is not in 𝒜_t"
            )));
        }
        mpp.validate(self.grid, self.catalog)?;
        let mut out = Vec::with_capacity(self.steps());
        let mut current = alpha_t;
        let mut next = 0;
        for k in 0..self.steps() {
            out.push(current);
            let end = self.grid.time(k + 1);
            while next < mpp.events.len() && mpp.events[next].time <= end {
                current = mpp.events[next].mark;
                next += 1;
            }
        }
        Ok(out)
    }

    /// `L^ν` on `(from, to]`: `exp(Σ log ν(τ_i, a_i) − ∫∫ (ν − 1) λ ds)`.
    #[allow(clippy::too_many_arguments)]
    pub fn girsanov_weight_between(
        &self,
        nu: &dyn IntensityControl,
        mpp: &MarkedPointProcess,
        b_edges: &[usize],
        alpha_t: MarkId,
        from: f64,
        to: f64,
    ) -> Result<f64> {
        Ok(self.log_weight_between(nu, mpp, b_edges, alpha_t, from, to)?.exp())
    }

    pub fn log_weight_between(
        &self,
        nu: &dyn IntensityControl,
        mpp: &MarkedPointProcess,
        b_edges: &[usize],
        alpha_t: MarkId,
        from: f64,
        to: f64,
    ) -> Result<f64> {
        let histories = self.histories(mpp, b_edges, alpha_t);
        let mut log_l = 0.0;
        for e in &mpp.events {
            if e.time <= from || e.time > to {
                continue;
            }
            let k = self.grid.cell_of(e.time).expect("validated event");
            log_l += checked(nu, &histories[k], e.mark)?.ln();
        }
        for (k, h) in histories.iter().enumerate() {
            let lo = self.grid.time(k).max(from);
            let hi = self.grid.time(k + 1).min(to);
            if hi <= lo {
                continue;
            }
            let mut excess = 0.0;
            for a in 0..self.catalog.count(k) {
                let lam = self.lambda.mass(k, a);
                if lam > 0.0 {
                    excess += (checked(nu, h, a)? - 1.0) * lam;
                }
            }
            log_l -= (hi - lo) * excess;
        }
        Ok(log_l)
    }

    /// Exact `E[L^ν_T]` and `E[L^ν_T N_T]` by summing over cell-wise event
    /// counts and last marks, with common-noise branching `b_probs`. Poisson
    /// series are truncated once the remaining tilted mass is below `1e-17`.
    pub fn exact_moments(
        &self,
        nu: &dyn IntensityControl,
        b_probs: &[f64],
        alpha_t: MarkId,
    ) -> Result<(f64, f64)> {
        let track = nu.uses_tree_node();
        let resolution = nu.events_resolution();
        // state -> (E[L 1{state}], E[L N 1{state}])
        let mut states: BTreeMap<History, (f64, f64)> = BTreeMap::new();
        states.insert(
            History {
                step: 0,
                b_node: 0,
                events: 0,
                last_mark: alpha_t,
                tree_node: 0,
            },
            (1.0, 0.0),
        );
        for k in 0..self.steps() {
            let dt = self.grid.dt(k);
            let count = self.catalog.count(k);
            let mut next: BTreeMap<History, (f64, f64)> = BTreeMap::new();
            for (h, (mass, nmass)) in states {
                let mut tilted = vec![0.0; count];
                let mut tilted_total = 0.0;
                for (a, t) in tilted.iter_mut().enumerate() {
                    let lam = self.lambda.mass(k, a);
                    if lam > 0.0 {
                        *t = checked(nu, &h, a)? * lam;
                        tilted_total += *t;
                    }
                }
                // Under the tilt, N in the cell is Poisson(Δ Σ νλ) and the last
                // mark is independent with law ∝ νλ, whatever λ's total is.
                let mean = tilted_total * dt;
                let mut p = (-mean).exp();
                let mut cum = 0.0;
                let mut n = 0usize;
                loop {
                    let applied = h.last_mark;
                    let mut base = h;
                    base.step = k + 1;
                    base.events = (h.events + n).min(resolution);
                    for (e, pe) in b_probs.iter().enumerate() {
                        let mut s = base;
                        s.b_node = h.b_node * self.nb + e;
                        s.tree_node = if track {
                            tree_child(self.catalog, self.nb, k, h.tree_node, applied, e)
                        } else {
                            0
                        };
                        if n == 0 {
                            let w = mass * pe * p;
                            let entry = next.entry(s).or_insert((0.0, 0.0));
                            entry.0 += w;
                            entry.1 += nmass * pe * p;
                        } else {
                            for (a, t) in tilted.iter().enumerate() {
                                if *t == 0.0 {
                                    continue;
                                }
                                let q = pe * p * t / tilted_total;
                                s.last_mark = a;
                                let entry = next.entry(s).or_insert((0.0, 0.0));
                                entry.0 += mass * q;
                                entry.1 += (nmass + mass * n as f64) * q;
                            }
                        }
                    }
                    cum += p;
                    if 1.0 - cum < 1e-17 || p == 0.0 && n as f64 > mean || mean == 0.0 {
                        break;
                    }
                    n += 1;
                    p *= mean / n as f64;
                }
            }
            states = next;
        }
        let mut total = (0.0, 0.0);
        for (m, nm) in states.values() {
            total.0 += m;
            total.1 += nm;
        }
        Ok(total)
    }

    /// `E^ν[∫∫ ν λ ds]` evaluated by the same recursion, which by Girsanov's
    /// theorem equals the tilted mean event count.
    pub fn tilted_mean_count(
        &self,
        nu: &dyn IntensityControl,
        b_probs: &[f64],
        alpha_t: MarkId,
    ) -> Result<f64> {
        Ok(self.exact_moments(nu, b_probs, alpha_t)?.1)
    }
}

/// `sample_ppp(λ, (t, T], seed)`.
pub fn sample_ppp<R: Rng>(rand: &Randomisation, rng: &mut R) -> MarkedPointProcess {
    rand.sample_ppp(rng)
}

/// `Î^{t,α_t}` on the grid as a decomposed control.
pub fn step_control(
    tree: &ScenarioTree,
    rand: &Randomisation,
    alpha_t: MarkId,
    mpp: &MarkedPointProcess,
) -> Result<DecomposedControl> {
    let marks = rand.step_marks(alpha_t, mpp)?;
    DecomposedControl::new(
        tree,
        (0..tree.steps())
            .map(|k| {
                let a = rand.catalog.as_action(tree, k, marks[k])?;
                Ok(vec![a; tree.node_count(k)])
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

/// `L^ν_upto` from the start of the grid.
pub fn girsanov_weight(
    rand: &Randomisation,
    nu: &dyn IntensityControl,
    mpp: &MarkedPointProcess,
    b_edges: &[usize],
    alpha_t: MarkId,
    upto: f64,
) -> Result<f64> {
    rand.girsanov_weight_between(nu, mpp, b_edges, alpha_t, rand.grid.start(), upto)
}

/// Common-noise path: one lattice edge per step.
pub fn sample_b_path<R: Rng>(tree: &ScenarioTree, rng: &mut R) -> Vec<usize> {
    let probs = tree.b_lattice().probs();
    (0..tree.steps())
        .map(|_| pick_weighted(rng, probs, 1.0))
        .collect()
}

/// Output of [`approximate_control_by_ppp`].
#[derive(Debug, Clone)]
pub struct ControlApproximation {
    pub alpha_t: MarkId,
    pub nu: BoostIntensity,
    pub delta: f64,
    /// Boosted arrival rate `log(2/δ)/Δ` of the target mark, per cell.
    pub rates: Vec<f64>,
}

/// Builds `ν^δ`: on each cell the mark of `𝒜_{t_k}` closest in expected `ρ̂` to
/// the next step's target action arrives at rate `log(2/δ)/Δ`; all other marks
/// keep intensity `floor`.
#[allow(clippy::too_many_arguments)]
pub fn approximate_control_by_ppp(
    tree: &ScenarioTree,
    actions: &ActionSet,
    rand: &Randomisation,
    ahat: &DecomposedControl,
    delta: f64,
    floor: f64,
    ceiling: f64,
) -> Result<ControlApproximation> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition(format!("δ = {delta} outside (0, 1)")));
    }
    rand.lambda.check_conditions(rand.catalog)?;
    let catalog = rand.catalog;
    let alpha_t = catalog
        .find(tree, ahat.at(0, 0))
        .ok_or_else(|| Error::InvalidControl("initial action not in the catalog".into()))?;
    let m = tree.steps();
    let mut targets = Vec::with_capacity(m);
    let mut boosts = Vec::with_capacity(m);
    let mut rates = Vec::with_capacity(m);
    let mut worst_achievable: f64 = 0.0;
    let mut infeasible = false;
    for k in 0..m {
        let dt = tree.grid().dt(k);
        let rate = (2.0 / delta).ln() / dt;
        rates.push(rate);
        if k + 1 == m {
            // Events in the last cell are never applied.
            targets.push(vec![None; tree.node_count(k)]);
            boosts.push(vec![floor; tree.node_count(k)]);
            continue;
        }
        let mut t_row = Vec::with_capacity(tree.node_count(k));
        let mut b_row = Vec::with_capacity(tree.node_count(k));
        for v in 0..tree.node_count(k) {
            let mut best = (f64::INFINITY, 0);
            for a in 0..catalog.count(k) {
                let lifted = catalog.as_action(tree, k + 1, a)?;
                let mut d = 0.0;
                for (child, p) in tree.children(v) {
                    d += p * rho_hat(tree, actions, ahat.at(k + 1, child), &lifted)?;
                }
                if d < best.0 {
                    best = (d, a);
                }
            }
            let lam = rand.lambda.mass(k, best.1);
            let nu = (rate / lam).max(floor);
            worst_achievable = worst_achievable.max(2.0 * (-ceiling * lam * dt).exp());
            if nu > ceiling {
                infeasible = true;
            }
            t_row.push(Some(best.1));
            b_row.push(nu);
        }
        targets.push(t_row);
        boosts.push(b_row);
    }
    if infeasible {
        return Err(Error::ApproxInfeasible {
            requested: delta,
            achievable: worst_achievable,
        });
    }
    Ok(ControlApproximation {
        alpha_t,
        nu: BoostIntensity {
            targets,
            boosts,
            floor,
        },
        delta,
        rates,
    })
}

/// Monte Carlo estimate of `E[d_𝒜̂(α̂, Î^δ)]` under the tilted law, with its
/// standard error.
pub fn estimate_approximation_distance(
    tree: &ScenarioTree,
    actions: &ActionSet,
    rand: &Randomisation,
    ahat: &DecomposedControl,
    approx: &ControlApproximation,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let samples = replicate(reps, seed, |_, rng| -> Result<f64> {
        let b = sample_b_path(tree, rng);
        let mpp = rand.sample_tilted(&approx.nu, &b, approx.alpha_t, rng)?;
        let marks = rand.step_marks(approx.alpha_t, &mpp)?;
        let mut node = 0;
        let mut d = 0.0;
        for k in 0..tree.steps() {
            let target = ahat.at(k, node);
            let w = &tree.atoms(k).weight;
            let applied = rand.catalog.restricted(k, marks[k]);
            let r: f64 = target
                .values()
                .iter()
                .zip(applied)
                .zip(w)
                .map(|((x, y), w)| w * actions.rho(*x, *y))
                .sum();
            d += tree.grid().dt(k) * r;
            node = node * tree.b_branching() + b[k];
        }
        Ok(d)
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_>>()?;
    Ok(mean_se(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{default_lambda_family, KappaKind};
    use crate::rng::stream;
    use crate::scenario::{AtomSpace, NoiseLattice};

    fn setup(steps: usize) -> (ScenarioTree, MarkCatalog) {
        let tree = ScenarioTree::build(
            TimeGrid::uniform(1.0, steps).unwrap(),
            NoiseLattice::binary(1),
            NoiseLattice::binary(1),
            AtomSpace::uniform(1).unwrap(),
        )
        .unwrap();
        let cat = MarkCatalog::build(&tree, 2, 4096).unwrap();
        (tree, cat)
    }

    #[test]
    fn zero_mass_gives_no_events() {
        let (tree, cat) = setup(2);
        let lam = LambdaFamily::unchecked(vec![vec![0.0; cat.len()]; 2]);
        let r = Randomisation::new(&tree, &cat, &lam).unwrap();
        let mut rng = stream(1, 0);
        for _ in 0..100 {
            assert!(r.sample_ppp(&mut rng).is_empty());
        }
    }

    #[test]
    fn step_marks_left_endpoint_convention() {
        let (tree, cat) = setup(2);
        let lam = default_lambda_family(&cat, KappaKind::UniformFull, 1.0).unwrap();
        let r = Randomisation::new(&tree, &cat, &lam).unwrap();
        let mpp = MarkedPointProcess {
            start: 0.0,
            events: vec![Event { time: 0.3, mark: 1 }, Event { time: 0.7, mark: 3 }],
        };
        assert_eq!(r.step_marks(0, &mpp).unwrap(), vec![0, 1]);
        let two = MarkedPointProcess {
            start: 0.0,
            events: vec![Event { time: 0.1, mark: 1 }, Event { time: 0.2, mark: 0 }],
        };
        assert_eq!(r.step_marks(1, &two).unwrap(), vec![1, 0]);
        assert_eq!(r.step_marks(1, &MarkedPointProcess::empty(0.0)).unwrap(), vec![1, 1]);
        let control = step_control(&tree, &r, 1, &MarkedPointProcess::empty(0.0)).unwrap();
        assert_eq!(control, DecomposedControl::constant(&tree, cat.mark(1).at(0)));
        // Mark 3 is only measurable from step 1.
        let bad = MarkedPointProcess {
            start: 0.0,
            events: vec![Event { time: 0.3, mark: 3 }],
        };
        assert!(matches!(r.step_marks(0, &bad), Err(Error::NotMeasurable(_))));
    }

    #[test]
    fn json_round_trip() {
        let mpp = MarkedPointProcess {
            start: 0.0,
            events: vec![Event { time: 0.25, mark: 2 }],
        };
        assert_eq!(MarkedPointProcess::from_json(&mpp.to_json().unwrap()).unwrap(), mpp);
    }

    #[test]
    fn girsanov_formula_examples() {
        let (tree, cat) = setup(2);
        let lam = default_lambda_family(&cat, KappaKind::UniformFull, 1.0).unwrap();
        let r = Randomisation::new(&tree, &cat, &lam).unwrap();
        let b = [0, 1];
        let empty = MarkedPointProcess::empty(0.0);
        let one = MarkedPointProcess {
            start: 0.0,
            events: vec![Event { time: 0.6, mark: 2 }],
        };
        assert_eq!(girsanov_weight(&r, &ConstantIntensity(1.0), &one, &b, 0, 1.0).unwrap(), 1.0);
        let c = 2.5;
        let integral: f64 = (0..2).map(|k| lam.total(k) * tree.grid().dt(k)).sum();
        let l0 = girsanov_weight(&r, &ConstantIntensity(c), &empty, &b, 0, 1.0).unwrap();
        assert!((l0 - (-(c - 1.0) * integral).exp()).abs() < 1e-15);
        let l1 = girsanov_weight(&r, &ConstantIntensity(c), &one, &b, 0, 1.0).unwrap();
        assert!((l1 - c * (-(c - 1.0) * integral).exp()).abs() < 1e-14);
    }

    #[test]
    fn nonpositive_intensity_rejected() {
        let (tree, cat) = setup(2);
        let lam = default_lambda_family(&cat, KappaKind::UniformFull, 1.0).unwrap();
        let r = Randomisation::new(&tree, &cat, &lam).unwrap();
        let one = MarkedPointProcess {
            start: 0.0,
            events: vec![Event { time: 0.6, mark: 2 }],
        };
        assert!(girsanov_weight(&r, &ConstantIntensity(0.0), &one, &[0, 0], 0, 1.0).is_err());
    }

    #[test]
    fn weight_composes_and_ignores_later_events() {
        let (tree, cat) = setup(3);
        let lam = default_lambda_family(&cat, KappaKind::UniformNew, 2.0).unwrap();
        let r = Randomisation::new(&tree, &cat, &lam).unwrap();
        let nu = LogisticIntensity {
            lo: 0.1,
            hi: 10.0,
            theta: [0.3, -0.4, 1.0, 0.5],
        };
        let mut rng = stream(9, 0);
        for _ in 0..50 {
            let b = sample_b_path(&tree, &mut rng);
            let mpp = r.sample_ppp(&mut rng);
            for s in [0.2, 0.5, 0.9] {
                let a = r.log_weight_between(&nu, &mpp, &b, 0, 0.0, s).unwrap();
                let c = r.log_weight_between(&nu, &mpp, &b, 0, s, 1.0).unwrap();
                let full = r.log_weight_between(&nu, &mpp, &b, 0, 0.0, 1.0).unwrap();
                assert!((a + c - full).abs() <= 1e-12 * (1.0 + full.abs()));
                let mut later = mpp.clone();
                let last = later.events.last().map(|e| e.time).unwrap_or(0.0).max(s);
                if last < 1.0 {
                    later.events.push(Event {
                        time: (last + 1.0) / 2.0,
                        mark: 0,
                    });
                    let before = r.log_weight_between(&nu, &later, &b, 0, 0.0, s).unwrap();
                    assert_eq!(before, a);
                }
            }
        }
    }

    #[test]
    fn exact_expectation_of_density_is_one() {
        let (tree, cat) = setup(3);
        let lam = default_lambda_family(&cat, KappaKind::UniformFull, 2.0).unwrap();
        let r = Randomisation::new(&tree, &cat, &lam).unwrap();
        let nus: Vec<Box<dyn IntensityControl>> = vec![
            Box::new(ConstantIntensity(1.0)),
            Box::new(ConstantIntensity(10.0)),
            Box::new(PerStepIntensity(vec![0.1, 3.0, 7.0])),
            Box::new(LogisticIntensity {
                lo: 0.1,
                hi: 10.0,
                theta: [0.0, 0.7, -1.5, 0.8],
            }),
        ];
        for nu in &nus {
            let (l, _) = r.exact_moments(nu.as_ref(), tree.b_lattice().probs(), 1).unwrap();
            assert!((l - 1.0).abs() < 1e-10, "{}: {l}", nu.name());
        }
        // Constant ν: tilted mean count is ν ∫ λ.
        let (_, n) = r
            .exact_moments(&ConstantIntensity(3.0), tree.b_lattice().probs(), 0)
            .unwrap();
        let integral: f64 = (0..3).map(|k| lam.total(k) * tree.grid().dt(k)).sum();
        assert!((n - 3.0 * integral).abs() < 1e-10);
    }
}
