//! Finitely supported probability measures and the 2-Wasserstein distance.

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// Supports above this size (per measure) are rejected for `d > 1`.
pub const DEFAULT_OT_CAP: usize = 64;

/// Below this combined support size the transport problem is solved by
/// enumerating basic feasible solutions instead of by min-cost flow.
pub const VERTEX_ENUMERATION_LIMIT: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    mean: Vec<f64>,
    second_moment: f64,
}

impl EmpiricalMeasure {
    /// `points` is row-major, one row of length `dim` per support point.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("zero-dimensional support".into()));
        }
        if points.len() != dim * weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates for {} points of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite support point".into()));
        }
        Ok(Self::from_parts(dim, points, weights))
    }

    /// Uniform weights `1/N`; the total is not revalidated, so very large
    /// particle clouds are accepted.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidMeasure("bad particle array".into()));
        }
        let n = points.len() / dim;
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite particle".into()));
        }
        Ok(Self::from_parts(dim, points, vec![1.0 / n as f64; n]))
    }

    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(x.len(), x.to_vec(), vec![1.0])
    }

    fn from_parts(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        let mut mean = vec![0.0; dim];
        let mut second_moment = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let x = &points[i * dim..(i + 1) * dim];
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += w * xi;
            }
            second_moment += w * x.iter().map(|v| v * v).sum::<f64>();
        }
        Self {
            dim,
            points,
            weights,
            mean,
            second_moment,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `∫ |y|² μ(dy)`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// `∫ |y - mean|² μ(dy)`, clamped at zero.
    pub fn variance(&self) -> f64 {
        let m2: f64 = self.mean.iter().map(|m| m * m).sum();
        (self.second_moment - m2).max(0.0)
    }

    /// Merges support points that agree coordinatewise within `1e-12`; the
    /// result is sorted lexicographically.
    pub fn aggregated(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| lex_cmp(self.point(i), self.point(j)));
        let mut points: Vec<f64> = Vec::with_capacity(self.points.len());
        let mut weights: Vec<f64> = Vec::with_capacity(self.len());
        for i in order {
            let x = self.point(i);
            let merge = weights
                .last()
                .map(|_| {
                    let last = &points[points.len() - self.dim..];
                    last.iter().zip(x).all(|(a, b)| (a - b).abs() <= 1e-12)
                })
                .unwrap_or(false);
            if merge {
                *weights.last_mut().expect("nonempty") += self.weights[i];
            } else {
                points.extend_from_slice(x);
                weights.push(self.weights[i]);
            }
        }
        Self::from_parts(self.dim, points, weights)
    }

    /// Equality as measures (after aggregation), within `tol` on weights and
    /// coordinates.
    pub fn same_law(&self, other: &Self, tol: f64) -> bool {
        if self.dim != other.dim {
            return false;
        }
        let (a, b) = (self.aggregated(), other.aggregated());
        a.len() == b.len()
            && a.points
                .iter()
                .zip(&b.points)
                .all(|(x, y)| (x - y).abs() <= tol)
            && a.weights
                .iter()
                .zip(&b.weights)
                .all(|(x, y)| (x - y).abs() <= tol)
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// 2-Wasserstein distance with the default support cap for `d > 1`.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wasserstein2_capped(mu, nu, DEFAULT_OT_CAP)
}

pub fn wasserstein2_capped(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cap: usize) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Dimension(format!(
            "measures on R^{} and R^{}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.dim() == 1 {
        return Ok(quantile_cost_1d(mu, nu).max(0.0).sqrt());
    }
    if mu.len() > cap || nu.len() > cap {
        return Err(Error::TooLarge {
            what: format!(
                "transport problem in R^{} (use d = 1 or shrink the supports)",
                mu.dim()
            ),
            needed: mu.len().max(nu.len()),
            budget: cap,
        });
    }
    let cost = squared_distance_matrix(mu, nu);
    let value = if mu.len() + nu.len() <= VERTEX_ENUMERATION_LIMIT {
        transport_by_vertex_enumeration(&cost, mu.weights(), nu.weights())
    } else {
        transport_by_min_cost_flow(&cost, mu.weights(), nu.weights())
    };
    Ok(value.max(0.0).sqrt())
}

/// Row-major `|x_i - y_j|²`.
pub fn squared_distance_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let mut cost = Vec::with_capacity(mu.len() * nu.len());
    for i in 0..mu.len() {
        for j in 0..nu.len() {
            cost.push(
                mu.point(i)
                    .iter()
                    .zip(nu.point(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
        }
    }
    cost
}

/// Squared 2-Wasserstein cost on the line via the monotone (quantile) coupling.
pub fn quantile_cost_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = (0..m.len()).map(|i| (m.point(i)[0], m.weight(i))).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(mu), sorted(nu));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        let d = a[i].0 - b[j].0;
        cost += m * d * d;
        ra -= m;
        rb -= m;
        // Advance whichever side is exhausted; weights that sum to 1 only up
        // to rounding leave crumbs below 1e-15.
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    cost
}

/// Exact transport cost by enumerating spanning-tree bases of the
/// transportation polytope. Only for tiny supports.
pub fn transport_by_vertex_enumeration(cost: &[f64], supply: &[f64], demand: &[f64]) -> f64 {
    let (n, m) = (supply.len(), demand.len());
    let basis = n + m - 1;
    let cells = n * m;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(basis);
    enumerate_subsets(cells, basis, 0, &mut chosen, &mut |subset| {
        if let Some(flow) = basic_solution(subset, n, m, supply, demand) {
            if flow.iter().all(|f| *f >= -1e-14) {
                let c: f64 = subset.iter().zip(&flow).map(|(cell, f)| cost[*cell] * f).sum();
                if c < best {
                    best = c;
                }
            }
        }
    });
    best
}

fn enumerate_subsets(
    n: usize,
    k: usize,
    start: usize,
    chosen: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    let remaining = k - chosen.len();
    for c in start..=(n - remaining) {
        chosen.push(c);
        enumerate_subsets(n, k, c + 1, chosen, visit);
        chosen.pop();
    }
}

/// Flows on the cells of `subset` if they form a spanning tree of the
/// bipartite supply/demand graph.
fn basic_solution(
    subset: &[usize],
    n: usize,
    m: usize,
    supply: &[f64],
    demand: &[f64],
) -> Option<Vec<f64>> {
    let nodes = n + m;
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut y = x;
        while parent[y] != r {
            let next = parent[y];
            parent[y] = r;
            y = next;
        }
        r
    }
    for &cell in subset {
        let (i, j) = (cell / m, n + cell % m);
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            return None;
        }
        parent[ri] = rj;
    }
    // Leaf peeling: a node of degree one fixes the flow on its only edge.
    let mut residual: Vec<f64> = supply.iter().chain(demand).copied().collect();
    let mut degree = vec![0usize; nodes];
    for &cell in subset {
        degree[cell / m] += 1;
        degree[n + cell % m] += 1;
    }
    let mut flow = vec![f64::NAN; subset.len()];
    let mut done = vec![false; subset.len()];
    for _ in 0..subset.len() {
        let (e, leaf) = subset.iter().enumerate().find_map(|(e, &cell)| {
            if done[e] {
                return None;
            }
            let (i, j) = (cell / m, n + cell % m);
            if degree[i] == 1 {
                Some((e, i))
            } else if degree[j] == 1 {
                Some((e, j))
            } else {
                None
            }
        })?;
        let cell = subset[e];
        let (i, j) = (cell / m, n + cell % m);
        let other = if leaf == i { j } else { i };
        let f = residual[leaf];
        flow[e] = f;
        residual[other] -= f;
        residual[leaf] = 0.0;
        degree[i] -= 1;
        degree[j] -= 1;
        done[e] = true;
    }
    Some(flow)
}

/// Exact transport cost by successive shortest augmenting paths on the
/// bipartite network (Bellman–Ford on the residual graph).
pub fn transport_by_min_cost_flow(cost: &[f64], supply: &[f64], demand: &[f64]) -> f64 {
    const EPS: f64 = 1e-15;
    let (n, m) = (supply.len(), demand.len());
    let mut flow = vec![0.0; n * m];
    let mut rem_supply = supply.to_vec();
    let mut rem_demand = demand.to_vec();
    // Node ids: sources 0..n, sinks n..n+m, super-source n+m.
    let total = n + m + 1;
    let root = n + m;
    // Residual augmentations can at worst saturate every arc once per phase;
    // the bound only guards against float-induced cycling.
    for _ in 0..4 * (n * m + n + m) {
        if rem_supply.iter().all(|s| *s <= EPS) || rem_demand.iter().all(|d| *d <= EPS) {
            break;
        }
        let mut dist = vec![f64::INFINITY; total];
        let mut pred = vec![usize::MAX; total];
        dist[root] = 0.0;
        for i in 0..n {
            if rem_supply[i] > EPS {
                dist[i] = 0.0;
                pred[i] = root;
            }
        }
        for _ in 0..total {
            let mut changed = false;
            for i in 0..n {
                for j in 0..m {
                    let c = cost[i * m + j];
                    let tol = 1e-13 * (1.0 + c.abs());
                    if dist[i] + c < dist[n + j] - tol {
                        dist[n + j] = dist[i] + c;
                        pred[n + j] = i;
                        changed = true;
                    }
                    if flow[i * m + j] > EPS && dist[n + j] - c < dist[i] - tol {
                        dist[i] = dist[n + j] - c;
                        pred[i] = n + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..m)
            .filter(|j| rem_demand[*j] > EPS && dist[n + j].is_finite())
            .min_by(|a, b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(sink) = sink else { break };
        let mut path = Vec::new();
        let mut v = n + sink;
        while pred[v] != root {
            let u = pred[v];
            if u == usize::MAX || path.len() > total {
                // Predecessor cycle from rounding; stop with what we have.
                return flow.iter().zip(cost).map(|(f, c)| f * c).sum();
            }
            path.push((u, v));
            v = u;
        }
        let source = v;
        let mut amount = rem_supply[source].min(rem_demand[sink]);
        for &(u, w) in &path {
            if u >= n {
                amount = amount.min(flow[w * m + (u - n)]);
            }
        }
        if amount <= EPS {
            break;
        }
        for &(u, w) in &path {
            if u < n {
                flow[u * m + (w - n)] += amount;
            } else {
                flow[w * m + (u - n)] -= amount;
            }
        }
        rem_supply[source] -= amount;
        rem_demand[sink] -= amount;
    }
    flow.iter().zip(cost).map(|(f, c)| f * c).sum()
}
