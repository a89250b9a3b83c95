//! Penalised and constrained backward equations on the mark-extended tree.
//!
//! At `(t_k, node)` with current mark `i`, let
//! `Ỹ(a) = f̄_k(a) Δ + E_B[Y_{k+1}(child(a))]` for `a ∈ 𝒜_{t_k}` and `Ŷ = Ỹ(i)`.
//! The penalised value solves `Y = Ŷ + nΔ Σ_a λ_k(a) (Ỹ(a) − Y)_+`; the
//! constrained limit is `max(Ŷ, max_{a ∈ supp λ_k} Ỹ(a))`.
//!
//! The jump law on the tree is the implicit one: under an intensity `ν`, mark
//! `a` is switched to at `t_k` with probability `νλ(a)Δ / (1 + Σ_b νλ(b)Δ)`,
//! so the conditional value is `(Ŷ + Σ νλΔ Ỹ) / (1 + Σ νλΔ)`. Its supremum
//! over `ν ≤ n` is the penalised fixed point above.

use std::io::Write;

use serde::Serialize;

use crate::controls::{LambdaFamily, MarkId};
use crate::dynamics::MarkTree;
use crate::error::{Error, Result};
use crate::randomisation::{History, IntensityClass, IntensityControl, TableIntensity};

/// Tolerance on decreases of `Y^n` in `n`.
pub const MONOTONICITY_TOL: f64 = 1e-12;

/// Penalty level; `Infinite` marks the constrained solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Level {
    Finite(f64),
    Infinite,
}

impl Level {
    pub fn label(&self) -> String {
        match self {
            Level::Finite(n) => format!("{n}"),
            Level::Infinite => "inf".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub level: Level,
    pub alpha_t: MarkId,
    /// `y[k][node]` for `k = 0..=depth`.
    pub y: Vec<Vec<f64>>,
    /// `u[k][node * count_k + a] = Ỹ(a) − Y_k`.
    pub u: Vec<Vec<f64>>,
    /// Compensator increment on step `k`: `dk[k][node] = Y_k − Ŷ`.
    pub dk: Vec<Vec<f64>>,
    /// Cumulative compensator `K_{t_k}`, zero at the root.
    pub k_cum: Vec<Vec<f64>>,
    /// Martingale increments along the current mark: `z[k][node * nb + e]`.
    pub z: Vec<Vec<f64>>,
    /// Largest one-step reconstruction residual.
    pub residual: f64,
}

impl BsdeSolution {
    pub fn root(&self) -> f64 {
        self.y[0][0]
    }

    /// `max_a U_+` at `(k, node)`, zero at the last step.
    pub fn max_u_plus(&self, mt: &MarkTree, k: usize, node: usize) -> f64 {
        if k >= self.u.len() {
            return 0.0;
        }
        let c = mt.count(k);
        self.u[k][node * c..(node + 1) * c]
            .iter()
            .fold(0.0, |m, u| m.max(*u))
    }

    /// Largest `U` over marks charged by `λ`.
    pub fn max_u_on_support(&self, mt: &MarkTree, lam: &LambdaFamily) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for k in 0..self.u.len() {
            let c = mt.count(k);
            for node in 0..mt.node_count(k) {
                for a in 0..c {
                    if lam.mass(k, a) > 0.0 {
                        worst = worst.max(self.u[k][node * c + a]);
                    }
                }
            }
        }
        worst
    }

    /// CSV rows `level,step,node,mark,Y,K,max_U_plus`.
    pub fn write_csv<W: Write>(&self, mt: &MarkTree, out: &mut W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "level,step,node,mark,Y,K,max_U_plus")?;
        }
        for k in 0..self.y.len() {
            for node in 0..self.y[k].len() {
                writeln!(
                    out,
                    "{},{},{},{},{:.16e},{:.16e},{:.16e}",
                    self.level.label(),
                    k,
                    node,
                    mt.current_mark(k, node, self.alpha_t),
                    self.y[k][node],
                    self.k_cum[k][node],
                    self.max_u_plus(mt, k, node)
                )?;
            }
        }
        Ok(())
    }
}

/// Root of `Y = Ŷ + Σ_a p_a (Ỹ_a − Y)_+`, found by adding marks in decreasing
/// order of `Ỹ` until the candidate stops below the next one.
pub fn penalised_fixed_point(y_hat: f64, candidates: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = candidates
        .iter()
        .copied()
        .filter(|(p, y)| *p > 0.0 && *y > y_hat)
        .collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut num = y_hat;
    let mut den = 1.0;
    let mut y = y_hat;
    for (p, yt) in sorted {
        if yt <= y {
            break;
        }
        num += p * yt;
        den += p;
        y = num / den;
    }
    y
}

fn check_inputs(mt: &MarkTree, lam: &LambdaFamily, alpha_t: MarkId, terminal: &[f64]) -> Result<()> {
    if alpha_t >= mt.count(0) {
        return Err(Error::NotMeasurable(format!("initial action {alpha_t} is not in 𝒜_t")));
    }
    if lam.steps() < mt.depth() {
        return Err(Error::Lambda("λ-family shorter than the mark tree".into()));
    }
    for k in 0..mt.depth() {
        if lam.masses(k).len() < mt.count(k) {
            return Err(Error::Lambda(format!(
                "λ_{k} has {} masses for {} marks",
                lam.masses(k).len(),
                mt.count(k)
            )));
        }
    }
    if terminal.len() != mt.node_count(mt.depth()) {
        return Err(Error::Dimension(format!(
            "terminal values for {} nodes, tree has {}",
            terminal.len(),
            mt.node_count(mt.depth())
        )));
    }
    Ok(())
}

/// `Ỹ(a)` for all `a ∈ 𝒜_{t_k}` at one node.
fn continuation(mt: &MarkTree, next: &[f64], k: usize, node: usize, out: &mut Vec<f64>) {
    let dt = mt.dt(k);
    out.clear();
    for a in 0..mt.count(k) {
        let mut e_next = 0.0;
        for (e, p) in mt.b_probs().iter().enumerate() {
            e_next += p * next[mt.child(k, node, a, e)];
        }
        out.push(mt.running(k, node, a) * dt + e_next);
    }
}

fn solve(mt: &MarkTree, lam: &LambdaFamily, level: Level, alpha_t: MarkId, terminal: &[f64]) -> Result<BsdeSolution> {
    check_inputs(mt, lam, alpha_t, terminal)?;
    if let Level::Finite(n) = level {
        if !(n >= 1.0) || !n.is_finite() {
            return Err(Error::Precondition(format!("penalty level {n} below 1")));
        }
    }
    let depth = mt.depth();
    let nb = mt.nb();
    let mut y: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    let mut u: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut dk: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); depth];
    y[depth] = terminal.to_vec();
    let mut residual: f64 = 0.0;
    let mut yt = Vec::new();
    let mut cand = Vec::new();
    for k in (0..depth).rev() {
        let count = mt.count(k);
        let dt = mt.dt(k);
        let masses = &lam.masses(k)[..mt.count(k)];
        let nodes = mt.node_count(k);
        let mut yk = vec![0.0; nodes];
        let mut uk = vec![0.0; nodes * count];
        let mut dkk = vec![0.0; nodes];
        let mut zk = vec![0.0; nodes * nb];
        for node in 0..nodes {
            continuation(mt, &y[k + 1], k, node, &mut yt);
            let i = mt.current_mark(k, node, alpha_t);
            let y_hat = yt[i];
            let value = match level {
                Level::Finite(n) => {
                    cand.clear();
                    cand.extend(yt.iter().zip(masses).map(|(v, l)| (n * dt * l, *v)));
                    penalised_fixed_point(y_hat, &cand)
                }
                Level::Infinite => yt
                    .iter()
                    .zip(masses)
                    .filter(|(_, l)| **l > 0.0)
                    .fold(y_hat, |m, (v, _)| m.max(*v)),
            };
            yk[node] = value;
            for a in 0..count {
                uk[node * count + a] = yt[a] - value;
            }
            dkk[node] = value - y_hat;
            let mean: f64 = (0..nb)
                .map(|e| mt.b_probs()[e] * y[k + 1][mt.child(k, node, i, e)])
                .sum();
            for e in 0..nb {
                zk[node * nb + e] = y[k + 1][mt.child(k, node, i, e)] - mean;
            }
            // Rebuild Y_k from the edge values, Z and the compensator implied
            // by U; the fixed point makes this exact.
            let compensator = match level {
                Level::Finite(n) => (0..count)
                    .map(|a| n * dt * masses[a] * uk[node * count + a].max(0.0))
                    .sum(),
                Level::Infinite => dkk[node],
            };
            let rebuilt = mt.running(k, node, i) * dt
                + (0..nb)
                    .map(|e| mt.b_probs()[e] * (y[k + 1][mt.child(k, node, i, e)] - zk[node * nb + e]))
                    .sum::<f64>()
                + compensator;
            let scale = 1.0 + value.abs();
            residual = residual.max((rebuilt - value).abs() / scale);
        }
        y[k] = yk;
        u[k] = uk;
        dk[k] = dkk;
        z[k] = zk;
    }
    let mut k_cum = vec![vec![0.0]];
    for k in 0..depth {
        let mut next = vec![0.0; mt.node_count(k + 1)];
        for (child, slot) in next.iter_mut().enumerate() {
            let (parent, _) = mt.parent(k + 1, child);
            *slot = k_cum[k][parent] + dk[k][parent];
        }
        k_cum.push(next);
    }
    Ok(BsdeSolution {
        level,
        alpha_t,
        y,
        u,
        dk,
        k_cum,
        z,
        residual,
    })
}

/// Penalised solution at level `n ≥ 1` with terminal values at the tree depth.
pub fn solve_penalised(
    mt: &MarkTree,
    lam: &LambdaFamily,
    n: f64,
    alpha_t: MarkId,
    terminal: &[f64],
) -> Result<BsdeSolution> {
    solve(mt, lam, Level::Finite(n), alpha_t, terminal)
}

/// Closed-form constrained solution: the Bellman recursion over `supp λ_k`.
pub fn solve_bellman(mt: &MarkTree, lam: &LambdaFamily, alpha_t: MarkId, terminal: &[f64]) -> Result<BsdeSolution> {
    solve(mt, lam, Level::Infinite, alpha_t, terminal)
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    pub levels: Vec<f64>,
    /// Root value per level.
    pub root_values: Vec<f64>,
    /// Largest decrease of `Y^n` in `n` over all nodes (zero if monotone).
    pub max_violation: f64,
    /// `max |Y^{n_last} − Y^∞|` over nodes.
    pub last_gap: f64,
    /// Richardson extrapolation `(n₂Y^{n₂} − n₁Y^{n₁})/(n₂ − n₁)` at the root.
    pub richardson_root: f64,
    pub richardson_gap: f64,
    pub limit_root: f64,
    /// `max U^∞` over marks charged by `λ`.
    pub max_u_on_support: f64,
    pub max_residual: f64,
}

/// Solves at every level, checks monotonicity node by node and compares the
/// last levels with the closed-form limit, which is returned.
pub fn solve_constrained_limit(
    mt: &MarkTree,
    lam: &LambdaFamily,
    levels: &[f64],
    alpha_t: MarkId,
    terminal: &[f64],
) -> Result<(BsdeSolution, Vec<BsdeSolution>, LimitReport)> {
    if levels.len() < 2 || levels.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Precondition("penalty levels must increase and have ≥ 2 entries".into()));
    }
    let sols: Vec<BsdeSolution> = levels
        .iter()
        .map(|n| solve_penalised(mt, lam, *n, alpha_t, terminal))
        .collect::<Result<_>>()?;
    let mut max_violation: f64 = 0.0;
    let mut worst = None;
    for pair in sols.windows(2) {
        for (k, (lo, hi)) in pair[0].y.iter().zip(&pair[1].y).enumerate() {
            for (node, (a, b)) in lo.iter().zip(hi).enumerate() {
                let drop = a - b;
                if drop > max_violation {
                    max_violation = drop;
                    worst = Some((k, node));
                }
            }
        }
    }
    if max_violation > MONOTONICITY_TOL {
        let (step, node) = worst.expect("recorded with the violation");
        return Err(Error::Monotonicity {
            violation: max_violation,
            step,
            node,
        });
    }
    let limit = solve_bellman(mt, lam, alpha_t, terminal)?;
    let last = sols.last().expect("two or more levels");
    let last_gap = last
        .y
        .iter()
        .zip(&limit.y)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let (n1, n2) = (levels[levels.len() - 2], levels[levels.len() - 1]);
    let (y1, y2) = (sols[sols.len() - 2].root(), last.root());
    let richardson_root = (n2 * y2 - n1 * y1) / (n2 - n1);
    let report = LimitReport {
        levels: levels.to_vec(),
        root_values: sols.iter().map(|s| s.root()).collect(),
        max_violation,
        last_gap,
        richardson_root,
        richardson_gap: (richardson_root - limit.root()).abs(),
        limit_root: limit.root(),
        max_u_on_support: limit.max_u_on_support(mt, lam),
        max_residual: sols.iter().map(|s| s.residual).fold(limit.residual, f64::max),
    };
    Ok((limit, sols, report))
}

fn history(mt: &MarkTree, k: usize, node: usize, alpha_t: MarkId) -> History {
    History {
        step: k,
        b_node: mt.b_node(k, node),
        events: 0,
        last_mark: mt.current_mark(k, node, alpha_t),
        tree_node: node,
    }
}

fn check_intensity(nu: &dyn IntensityControl) -> Result<()> {
    if nu.events_resolution() != 0 {
        return Err(Error::Intensity(format!(
            "{} depends on event counts, which the mark tree does not carry",
            nu.name()
        )));
    }
    Ok(())
}

fn nu_at(nu: &dyn IntensityControl, h: &History, a: MarkId) -> Result<f64> {
    let v = nu.intensity(h, a);
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Intensity(format!("{} = {v} at step {} mark {a}", nu.name(), h.step)));
    }
    Ok(v)
}

/// Conditional tilted values `E^ν[terminal + Σ f̄Δ | node]` by the linear
/// backward recursion `(Ŷ + Σ νλΔ Ỹ) / (1 + Σ νλΔ)`.
pub fn evaluate_tilted(
    mt: &MarkTree,
    lam: &LambdaFamily,
    nu: &dyn IntensityControl,
    alpha_t: MarkId,
    terminal: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_inputs(mt, lam, alpha_t, terminal)?;
    check_intensity(nu)?;
    let depth = mt.depth();
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    vals[depth] = terminal.to_vec();
    let mut yt = Vec::new();
    for k in (0..depth).rev() {
        let dt = mt.dt(k);
        let masses = &lam.masses(k)[..mt.count(k)];
        let mut vk = vec![0.0; mt.node_count(k)];
        for (node, slot) in vk.iter_mut().enumerate() {
            continuation(mt, &vals[k + 1], k, node, &mut yt);
            let h = history(mt, k, node, alpha_t);
            let mut num = yt[h.last_mark];
            let mut den = 1.0;
            for a in 0..mt.count(k) {
                if masses[a] > 0.0 {
                    let w = nu_at(nu, &h, a)? * masses[a] * dt;
                    num += w * yt[a];
                    den += w;
                }
            }
            *slot = num / den;
        }
        vals[k] = vk;
    }
    Ok(vals)
}

/// Root value of the same functional as `E[L^ν · payoff]` under the untilted
/// tree law, with the density `L^ν` accumulated forward path by path.
pub fn evaluate_tilted_forward(
    mt: &MarkTree,
    lam: &LambdaFamily,
    nu: &dyn IntensityControl,
    alpha_t: MarkId,
    terminal: &[f64],
) -> Result<f64> {
    check_inputs(mt, lam, alpha_t, terminal)?;
    check_intensity(nu)?;
    let depth = mt.depth();
    // (base probability, density, running reward so far)
    let mut layer = vec![(1.0f64, 1.0f64, 0.0f64)];
    for k in 0..depth {
        let dt = mt.dt(k);
        let masses = &lam.masses(k)[..mt.count(k)];
        let mut next = vec![(0.0, 0.0, 0.0); mt.node_count(k + 1)];
        for (node, (q, l, run)) in layer.iter().enumerate() {
            let h = history(mt, k, node, alpha_t);
            let i = h.last_mark;
            let mut base_den = 1.0;
            let mut tilt_den = 1.0;
            let mut base = vec![0.0; mt.count(k)];
            let mut tilt = vec![0.0; mt.count(k)];
            for a in 0..mt.count(k) {
                if masses[a] > 0.0 {
                    base[a] = masses[a] * dt;
                    tilt[a] = nu_at(nu, &h, a)? * masses[a] * dt;
                    base_den += base[a];
                    tilt_den += tilt[a];
                }
            }
            base[i] += 1.0;
            tilt[i] += 1.0;
            for a in 0..mt.count(k) {
                if base[a] == 0.0 {
                    continue;
                }
                let pb = base[a] / base_den;
                let ratio = (tilt[a] / tilt_den) / pb;
                let r = run + mt.running(k, node, a) * dt;
                for (e, pe) in mt.b_probs().iter().enumerate() {
                    next[mt.child(k, node, a, e)] = (q * pb * pe, l * ratio, r);
                }
            }
        }
        layer = next;
    }
    Ok(layer
        .iter()
        .zip(terminal)
        .map(|((q, l, run), g)| q * l * (run + g))
        .sum())
}

/// Bang-bang intensity `ν^{n,ε}`: `n` where `U ≥ 0`, `ε` elsewhere.
pub fn bang_bang_intensity(mt: &MarkTree, sol: &BsdeSolution, n: f64, eps: f64) -> Result<TableIntensity> {
    if !(eps > 0.0 && eps <= n) {
        return Err(Error::Precondition(format!("need 0 < ε ≤ n, got ε = {eps}, n = {n}")));
    }
    let values = sol
        .u
        .iter()
        .map(|row| row.iter().map(|u| if *u >= 0.0 { n } else { eps }).collect())
        .collect();
    Ok(TableIntensity {
        label: format!("bang-bang(n={n}, eps={eps:e})"),
        values,
        width: (0..mt.depth()).map(|k| mt.count(k)).collect(),
        lo: eps,
        hi: n,
        class: IntensityClass::Capped(n),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RepresentationReport {
    pub level: f64,
    pub names: Vec<String>,
    /// Root value per grid member.
    pub values: Vec<f64>,
    /// Largest `E^ν − Y^n` over nodes and members (≤ 0 when the bound holds).
    pub max_excess: f64,
    /// Node of the largest excess: `(member, step, node)`.
    pub witness: (usize, usize, usize),
    /// `Y^n_root − max_ν E^ν_root`.
    pub root_gap: f64,
    /// Largest over nodes of `Y^n − max_ν E^ν`.
    pub max_node_gap: f64,
}

/// Checks `E^ν ≤ Y^n` node by node for every member of `nu_grid` (all must be
/// capped by `n`) and reports how close the grid comes to `Y^n`.
pub fn representation_check(
    mt: &MarkTree,
    lam: &LambdaFamily,
    sol: &BsdeSolution,
    nu_grid: &[&dyn IntensityControl],
    terminal: &[f64],
) -> Result<RepresentationReport> {
    let Level::Finite(n) = sol.level else {
        return Err(Error::Precondition("representation needs a finite level".into()));
    };
    if nu_grid.is_empty() {
        return Err(Error::Precondition("empty intensity grid".into()));
    }
    let mut values = Vec::new();
    let mut best: Vec<Vec<f64>> = sol.y.iter().map(|r| vec![f64::NEG_INFINITY; r.len()]).collect();
    let mut max_excess = f64::NEG_INFINITY;
    let mut witness = (0, 0, 0);
    for (j, nu) in nu_grid.iter().enumerate() {
        if nu.ceiling() > n * (1.0 + 1e-12) {
            return Err(Error::Intensity(format!("{} exceeds the cap {n}", nu.name())));
        }
        let vals = evaluate_tilted(mt, lam, *nu, sol.alpha_t, terminal)?;
        for (k, row) in vals.iter().enumerate() {
            for (node, v) in row.iter().enumerate() {
                let excess = v - sol.y[k][node];
                if excess > max_excess {
                    max_excess = excess;
                    witness = (j, k, node);
                }
                best[k][node] = best[k][node].max(*v);
            }
        }
        values.push(vals[0][0]);
    }
    let max_node_gap = best
        .iter()
        .zip(&sol.y)
        .flat_map(|(b, y)| b.iter().zip(y).map(|(b, y)| y - b))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RepresentationReport {
        level: n,
        names: nu_grid.iter().map(|nu| nu.name()).collect(),
        root_gap: sol.root() - best[0][0],
        values,
        max_excess,
        witness,
        max_node_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_fixed_points() {
        assert_eq!(penalised_fixed_point(0.0, &[(1.0, 1.0)]), 0.5);
        assert!((penalised_fixed_point(0.0, &[(10.0, 1.0)]) - 10.0 / 11.0).abs() < 1e-15);
        assert!((penalised_fixed_point(0.0, &[(100.0, 1.0)]) - 100.0 / 101.0).abs() < 1e-15);
        assert!((penalised_fixed_point(0.0, &[(1e12, 1.0)]) - 1.0).abs() < 1e-11);
        assert_eq!(penalised_fixed_point(2.0, &[(5.0, 1.0)]), 2.0);
        assert_eq!(penalised_fixed_point(0.0, &[(0.0, 9.0)]), 0.0);
    }

    #[test]
    fn fixed_point_skips_marks_below_the_solution() {
        // Ŷ = 0, marks (p, Ỹ) = (1, 3), (1, 0.5): with the first mark alone
        // Y = 1.5 > 0.5, so the second mark is inactive.
        let y = penalised_fixed_point(0.0, &[(1.0, 0.5), (1.0, 3.0)]);
        assert_eq!(y, 1.5);
        // With both active: Y = (0 + 3 + 2.5)/3 = 11/6 and 2.5 > 11/6.
        let y = penalised_fixed_point(0.0, &[(1.0, 2.5), (1.0, 3.0)]);
        assert!((y - 11.0 / 6.0).abs() < 1e-15);
        let check = |y: f64| 0.0 + (2.5 - y).max(0.0) + (3.0 - y).max(0.0) - y;
        assert!(check(y).abs() < 1e-14);
    }

    #[test]
    fn two_alternatives_limit_is_max() {
        let n = 1e12;
        for w in [(1.0, 1e-3), (1e-3, 1.0), (0.5, 0.5)] {
            let y = penalised_fixed_point(0.0, &[(n * w.0, 1.0), (n * w.1, 2.0)]);
            assert!((y - 2.0).abs() < 1e-8, "{y}");
        }
    }
}
