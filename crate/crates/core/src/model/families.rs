//! Built-in parametric coefficient and reward families.

use super::{Coefficients, Dims, EmpiricalMeasure, FamilySpec, Reward, SPOT_CHECK_RADIUS};
use crate::error::{Error, Result};

fn expect_params<'a>(name: &str, params: &'a [f64], n: usize) -> Result<&'a [f64]> {
    if params.len() != n {
        return Err(Error::Precondition(format!(
            "family `{name}` takes {n} parameters, got {}",
            params.len()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Precondition(format!("family `{name}`: non-finite parameter")));
    }
    Ok(params)
}

/// Action component acting on state coordinate `i`: componentwise when the
/// action has `d` entries, otherwise its first entry.
#[inline]
fn action_at(a: &[f64], i: usize, d: usize) -> f64 {
    if a.len() == d {
        a[i]
    } else {
        a.first().copied().unwrap_or(0.0)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist_to_mean(x: &[f64], law: &EmpiricalMeasure) -> f64 {
    x.iter()
        .zip(law.mean())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `b = b0 + bx·x + bm·mean(μ) + ba·a`, `σ = (s + sa·a)·I`, `σ⁰ = s0·I`.
///
/// Parameters in order: `[b0, bx, bm, ba, s, sa, s0]`.
#[derive(Debug, Clone)]
pub struct LinearCoefficients {
    pub dims: Dims,
    pub b0: f64,
    pub bx: f64,
    pub bm: f64,
    pub ba: f64,
    pub s: f64,
    pub sa: f64,
    pub s0: f64,
    pub declared_lipschitz: f64,
    pub declared_bound: f64,
}

impl LinearCoefficients {
    pub fn from_params(spec: &FamilySpec) -> Result<Self> {
        let p = expect_params("linear", spec.params, 7)?;
        Ok(Self::new(spec.dims, [p[0], p[1], p[2], p[3], p[4], p[5], p[6]], spec.action_bound))
    }

    pub fn new(dims: Dims, p: [f64; 7], action_bound: f64) -> Self {
        let [b0, bx, bm, ba, s, sa, s0] = p;
        let sd = (dims.d as f64).sqrt();
        let lipschitz = bx.abs() + bm.abs();
        let bound = (b0.abs() + ba.abs() * action_bound) * sd
            + (s.abs() + sa.abs() * action_bound) * (dims.d.min(dims.m) as f64).sqrt()
            + s0.abs() * (dims.d.min(dims.n) as f64).sqrt();
        Self {
            dims,
            b0,
            bx,
            bm,
            ba,
            s,
            sa,
            s0,
            declared_lipschitz: lipschitz,
            declared_bound: bound,
        }
    }

    /// `dX = (α + E[X]) ds` without noise.
    pub fn intro(d: usize, action_bound: f64) -> Result<Self> {
        if d != 1 {
            return Err(Error::Dimension("the intro dynamics are one-dimensional".into()));
        }
        Ok(Self::new(
            Dims { d: 1, m: 1, n: 1 },
            [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            action_bound,
        ))
    }
}

impl Coefficients for LinearCoefficients {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn drift(&self, _t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64], out: &mut [f64]) {
        let mean = law.mean();
        for i in 0..self.dims.d {
            out[i] = self.b0
                + self.bx * x[i]
                + self.bm * mean[i]
                + self.ba * action_at(a, i, self.dims.d);
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _law: &EmpiricalMeasure, a: &[f64], out: &mut [f64]) {
        let Dims { d, m, .. } = self.dims;
        out.fill(0.0);
        for i in 0..d.min(m) {
            out[i * m + i] = self.s + self.sa * action_at(a, i, d);
        }
    }

    fn common_diffusion(
        &self,
        _t: f64,
        _x: &[f64],
        _law: &EmpiricalMeasure,
        _a: &[f64],
        out: &mut [f64],
    ) {
        let Dims { d, n, .. } = self.dims;
        out.fill(0.0);
        for i in 0..d.min(n) {
            out[i * n + i] = self.s0;
        }
    }

    fn lipschitz(&self) -> f64 {
        self.declared_lipschitz
    }

    fn bound(&self) -> f64 {
        self.declared_bound
    }

    fn name(&self) -> String {
        "linear".into()
    }
}

/// `f = cx·Σx − ca·|a| − qm·|x − mean|`, `g = pg·Σx − pm·|x − mean|`.
///
/// Parameters in order: `[cx, ca, qm, pg, pm]`.
#[derive(Debug, Clone)]
pub struct LinearReward {
    pub cx: f64,
    pub ca: f64,
    pub qm: f64,
    pub pg: f64,
    pub pm: f64,
    growth: f64,
}

impl LinearReward {
    pub fn from_params(spec: &FamilySpec) -> Result<Self> {
        let p = expect_params("linear", spec.params, 5)?;
        let sd = (spec.dims.d as f64).sqrt();
        let growth = p[1].abs() * spec.action_bound
            + (p[0].abs() + p[3].abs()) * sd
            + p[2].abs()
            + p[4].abs();
        Ok(Self {
            cx: p[0],
            ca: p[1],
            qm: p[2],
            pg: p[3],
            pm: p[4],
            growth,
        })
    }
}

impl Reward for LinearReward {
    fn running(&self, _t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64]) -> f64 {
        self.cx * x.iter().sum::<f64>() - self.ca * norm(a) - self.qm * dist_to_mean(x, law)
    }

    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure) -> f64 {
        self.pg * x.iter().sum::<f64>() - self.pm * dist_to_mean(x, law)
    }

    fn growth(&self) -> f64 {
        self.growth
    }

    fn name(&self) -> String {
        "linear".into()
    }
}

/// `f = −q|x|² − qm|x − mean|² − r|a|² + cx·Σx`, `g = −p|x|² − pm|x − mean|²`.
///
/// Parameters in order: `[q, qm, r, p, pm, cx]`. Quadratic rewards only grow
/// linearly on bounded sets; the declared growth constant holds for states and
/// supports in the spot-check box.
#[derive(Debug, Clone)]
pub struct QuadraticReward {
    pub q: f64,
    pub qm: f64,
    pub r: f64,
    pub p: f64,
    pub pm: f64,
    pub cx: f64,
    growth: f64,
}

impl QuadraticReward {
    pub fn from_params(spec: &FamilySpec) -> Result<Self> {
        let p = expect_params("linear-quadratic", spec.params, 6)?;
        let sd = (spec.dims.d as f64).sqrt();
        let radius = SPOT_CHECK_RADIUS * sd;
        let growth = (p[0].abs() + p[3].abs()) * radius
            + 2.0 * radius * (p[1].abs() + p[4].abs())
            + p[2].abs() * spec.action_bound * spec.action_bound
            + p[5].abs() * sd;
        Ok(Self {
            q: p[0],
            qm: p[1],
            r: p[2],
            p: p[3],
            pm: p[4],
            cx: p[5],
            growth,
        })
    }
}

impl Reward for QuadraticReward {
    fn running(&self, _t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64]) -> f64 {
        let dm = dist_to_mean(x, law);
        let na = norm(a);
        let nx = norm(x);
        -self.q * nx * nx - self.qm * dm * dm - self.r * na * na + self.cx * x.iter().sum::<f64>()
    }

    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure) -> f64 {
        let dm = dist_to_mean(x, law);
        let nx = norm(x);
        -self.p * nx * nx - self.pm * dm * dm
    }

    fn growth(&self) -> f64 {
        self.growth
    }

    fn name(&self) -> String {
        "linear-quadratic".into()
    }
}

/// Reading of the negative part `(y)_−`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum NegativePart {
    /// `(y)_− = min(y, 0)`.
    Min,
    /// `(y)_− = max(−y, 0)`.
    Max,
}

impl NegativePart {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            NegativePart::Min => y.min(0.0),
            NegativePart::Max => (-y).max(0.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NegativePart::Min => "min(y,0)",
            NegativePart::Max => "max(-y,0)",
        }
    }
}

/// `g(x) = (x − 1)_+ + (x − 5/2)_−`, no running reward.
#[derive(Debug, Clone, Copy)]
pub struct IntroReward {
    pub convention: NegativePart,
}

impl IntroReward {
    pub fn new(convention: NegativePart) -> Self {
        Self { convention }
    }

    pub fn payoff(&self, x: f64) -> f64 {
        (x - 1.0).max(0.0) + self.convention.apply(x - 2.5)
    }
}

impl Reward for IntroReward {
    fn running(&self, _t: f64, _x: &[f64], _law: &EmpiricalMeasure, _a: &[f64]) -> f64 {
        0.0
    }

    fn terminal(&self, x: &[f64], _law: &EmpiricalMeasure) -> f64 {
        self.payoff(x[0])
    }

    fn growth(&self) -> f64 {
        3.5
    }

    fn name(&self) -> String {
        match self.convention {
            NegativePart::Min => "intro-min".into(),
            NegativePart::Max => "intro-max".into(),
        }
    }
}
