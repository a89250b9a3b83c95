//! Problem data: coefficients, rewards, initial conditions and measures.

mod families;
mod measure;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

pub use families::{IntroReward, LinearCoefficients, LinearReward, NegativePart, QuadraticReward};
pub use measure::{
    quantile_cost_1d, squared_distance_matrix, transport_by_min_cost_flow,
    transport_by_vertex_enumeration, wasserstein2, wasserstein2_capped, EmpiricalMeasure,
    DEFAULT_OT_CAP, VERTEX_ENUMERATION_LIMIT,
};

use crate::error::{Error, Result};
use crate::scenario::AtomSpace;

/// State dimension `d`, idiosyncratic noise dimension `m`, common noise
/// dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

/// Drift and volatilities of the controlled McKean–Vlasov SDE.
///
/// Outputs are written into caller buffers: `drift` has length `d`,
/// `diffusion` is `d × m` and `common_diffusion` is `d × n`, both row-major.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> Dims;
    fn drift(&self, t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64], out: &mut [f64]);
    fn common_diffusion(
        &self,
        t: f64,
        x: &[f64],
        law: &EmpiricalMeasure,
        a: &[f64],
        out: &mut [f64],
    );
    /// Declared Lipschitz constant in `(x, μ)`, uniform in `(t, a)`.
    fn lipschitz(&self) -> f64;
    /// Declared bound on the coefficients at `(x, μ) = (0, δ_0)`.
    fn bound(&self) -> f64;
    fn name(&self) -> String;
}

pub trait Reward: Send + Sync {
    fn running(&self, t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64]) -> f64;
    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure) -> f64;
    /// Declared linear-growth constant.
    fn growth(&self) -> f64;
    fn name(&self) -> String;
}

type DriftFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync;
type RunningFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &[f64]) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64], &EmpiricalMeasure) -> f64 + Send + Sync;

/// Coefficients assembled from closures, for user-defined models.
pub struct ClosureCoefficients {
    pub name: String,
    pub dims: Dims,
    pub drift: Box<DriftFn>,
    pub diffusion: Box<DriftFn>,
    pub common_diffusion: Box<DriftFn>,
    pub lipschitz: f64,
    pub bound: f64,
}

impl Coefficients for ClosureCoefficients {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn drift(&self, t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, law, a, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, law, a, out)
    }
    fn common_diffusion(
        &self,
        t: f64,
        x: &[f64],
        law: &EmpiricalMeasure,
        a: &[f64],
        out: &mut [f64],
    ) {
        (self.common_diffusion)(t, x, law, a, out)
    }
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    fn bound(&self) -> f64 {
        self.bound
    }
    fn name(&self) -> String {
        self.name.clone()
    }
}

pub struct ClosureReward {
    pub name: String,
    pub running: Box<RunningFn>,
    pub terminal: Box<TerminalFn>,
    pub growth: f64,
}

impl Reward for ClosureReward {
    fn running(&self, t: f64, x: &[f64], law: &EmpiricalMeasure, a: &[f64]) -> f64 {
        (self.running)(t, x, law, a)
    }
    fn terminal(&self, x: &[f64], law: &EmpiricalMeasure) -> f64 {
        (self.terminal)(x, law)
    }
    fn growth(&self) -> f64 {
        self.growth
    }
    fn name(&self) -> String {
        self.name.clone()
    }
}

/// Everything a family constructor gets to see.
#[derive(Debug, Clone)]
pub struct FamilySpec<'a> {
    pub dims: Dims,
    pub params: &'a [f64],
    /// Largest action norm, used for declared bounds.
    pub action_bound: f64,
}

type CoefficientsCtor = dyn Fn(&FamilySpec) -> Result<Arc<dyn Coefficients>> + Send + Sync;
type RewardCtor = dyn Fn(&FamilySpec) -> Result<Arc<dyn Reward>> + Send + Sync;

/// Name → constructor tables for coefficient and reward families.
pub struct ModelRegistry {
    coefficients: BTreeMap<String, Box<CoefficientsCtor>>,
    rewards: BTreeMap<String, Box<RewardCtor>>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            coefficients: BTreeMap::new(),
            rewards: BTreeMap::new(),
        }
    }

    /// `linear` coefficients; `linear`, `linear-quadratic`, `intro-min` and
    /// `intro-max` rewards.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register_coefficients("linear", |spec| {
            Ok(Arc::new(LinearCoefficients::from_params(spec)?) as Arc<dyn Coefficients>)
        });
        reg.register_coefficients("intro", |spec| {
            Ok(Arc::new(LinearCoefficients::intro(spec.dims.d, spec.action_bound)?)
                as Arc<dyn Coefficients>)
        });
        reg.register_reward("linear", |spec| {
            Ok(Arc::new(LinearReward::from_params(spec)?) as Arc<dyn Reward>)
        });
        reg.register_reward("linear-quadratic", |spec| {
            Ok(Arc::new(QuadraticReward::from_params(spec)?) as Arc<dyn Reward>)
        });
        reg.register_reward("intro-min", |_| {
            Ok(Arc::new(IntroReward::new(NegativePart::Min)) as Arc<dyn Reward>)
        });
        reg.register_reward("intro-max", |_| {
            Ok(Arc::new(IntroReward::new(NegativePart::Max)) as Arc<dyn Reward>)
        });
        reg
    }

    pub fn register_coefficients(
        &mut self,
        name: &str,
        ctor: impl Fn(&FamilySpec) -> Result<Arc<dyn Coefficients>> + Send + Sync + 'static,
    ) {
        self.coefficients.insert(name.to_string(), Box::new(ctor));
    }

    pub fn register_reward(
        &mut self,
        name: &str,
        ctor: impl Fn(&FamilySpec) -> Result<Arc<dyn Reward>> + Send + Sync + 'static,
    ) {
        self.rewards.insert(name.to_string(), Box::new(ctor));
    }

    pub fn coefficients(&self, name: &str, spec: &FamilySpec) -> Result<Arc<dyn Coefficients>> {
        let ctor = self
            .coefficients
            .get(name)
            .ok_or_else(|| Error::UnknownFamily(name.to_string()))?;
        ctor(spec)
    }

    pub fn reward(&self, name: &str, spec: &FamilySpec) -> Result<Arc<dyn Reward>> {
        let ctor = self
            .rewards
            .get(name)
            .ok_or_else(|| Error::UnknownFamily(name.to_string()))?;
        ctor(spec)
    }

    pub fn coefficient_names(&self) -> impl Iterator<Item = &str> {
        self.coefficients.keys().map(String::as_str)
    }

    pub fn reward_names(&self) -> impl Iterator<Item = &str> {
        self.rewards.keys().map(String::as_str)
    }
}

/// Initial state per root atom, flattened row-major (`d` values per atom).
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    dim: usize,
    values: Vec<f64>,
}

impl InitialCondition {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} initial values for dimension {dim}",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite initial value".into()));
        }
        Ok(Self { dim, values })
    }

    pub fn scalar(values: &[f64]) -> Self {
        Self {
            dim: 1,
            values: values.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, atom: usize) -> &[f64] {
        &self.values[atom * self.dim..(atom + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Shift every atom by `eps` along coordinate 0.
    pub fn shifted(&self, eps: f64) -> Self {
        let mut values = self.values.clone();
        for chunk in values.chunks_mut(self.dim) {
            chunk[0] += eps;
        }
        Self {
            dim: self.dim,
            values,
        }
    }

    /// Reorders the atoms: atom `i` of the result carries the value of atom
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::Dimension("permutation length".into()));
        }
        let mut seen = vec![false; perm.len()];
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Precondition("not a permutation".into()));
            }
            values.extend_from_slice(self.value(p));
        }
        Ok(Self {
            dim: self.dim,
            values,
        })
    }

    /// The law of `ξ` under the atom weights, with equal points merged.
    pub fn law(&self, atoms: &AtomSpace) -> Result<EmpiricalMeasure> {
        if atoms.len() != self.len() {
            return Err(Error::MissingAtom {
                step: 0,
                expected: atoms.len(),
                got: self.len(),
            });
        }
        Ok(EmpiricalMeasure::new(self.dim, self.values.clone(), atoms.probs().to_vec())?.aggregated())
    }
}

/// `law_of(ξ)`.
pub fn law_of(xi: &InitialCondition, atoms: &AtomSpace) -> Result<EmpiricalMeasure> {
    xi.law(atoms)
}

/// Radius of the box from which spot-check states and support points are
/// drawn.
pub const SPOT_CHECK_RADIUS: f64 = 4.0;

fn random_measure<R: Rng>(rng: &mut R, dim: usize) -> EmpiricalMeasure {
    let n = rng.random_range(1..=3);
    let points: Vec<f64> = (0..n * dim)
        .map(|_| rng.random_range(-SPOT_CHECK_RADIUS..SPOT_CHECK_RADIUS))
        .collect();
    let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let head: f64 = w[1..].iter().sum();
    w[0] = 1.0 - head;
    EmpiricalMeasure::new(dim, points, w).expect("valid random measure")
}

fn random_point<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.random_range(-SPOT_CHECK_RADIUS..SPOT_CHECK_RADIUS))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Randomised probe of the declared Lipschitz constant and of finiteness.
/// Returns the largest observed ratio `|Δcoeff| / (|x−y| + 𝒲₂(μ,ν))`.
pub fn spot_check_lipschitz<R: Rng>(
    coeffs: &dyn Coefficients,
    actions: &[Vec<f64>],
    samples: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<f64> {
    let Dims { d, m, n } = coeffs.dims();
    let l = coeffs.lipschitz();
    let mut worst: f64 = 0.0;
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let (mut sx, mut sy) = (vec![0.0; d * m], vec![0.0; d * m]);
    let (mut cx, mut cy) = (vec![0.0; d * n], vec![0.0; d * n]);
    for _ in 0..samples {
        let t = rng.random_range(0.0..=horizon);
        let (x, y) = (random_point(rng, d), random_point(rng, d));
        let (mu, nu) = (random_measure(rng, d), random_measure(rng, d));
        let a = &actions[rng.random_range(0..actions.len())];
        coeffs.drift(t, &x, &mu, a, &mut bx);
        coeffs.drift(t, &y, &nu, a, &mut by);
        coeffs.diffusion(t, &x, &mu, a, &mut sx);
        coeffs.diffusion(t, &y, &nu, a, &mut sy);
        coeffs.common_diffusion(t, &x, &mu, a, &mut cx);
        coeffs.common_diffusion(t, &y, &nu, a, &mut cy);
        if bx.iter().chain(&sx).chain(&cx).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "coefficient",
                step: 0,
                particle: 0,
            });
        }
        let lhs = diff_norm(&bx, &by) + diff_norm(&sx, &sy) + diff_norm(&cx, &cy);
        let dist = diff_norm(&x, &y) + wasserstein2(&mu, &nu)?;
        if lhs > l * dist * (1.0 + 1e-8) + 1e-12 {
            return Err(Error::Precondition(format!(
                "{}: declared Lipschitz constant {l} violated (ratio {})",
                coeffs.name(),
                lhs / dist
            )));
        }
        if dist > 0.0 {
            worst = worst.max(lhs / dist);
        }
    }
    Ok(worst)
}

/// Randomised probe of the declared linear-growth constant of a reward.
pub fn spot_check_growth<R: Rng>(
    reward: &dyn Reward,
    dim: usize,
    actions: &[Vec<f64>],
    samples: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<f64> {
    let mgrowth = reward.growth();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.random_range(0.0..=horizon);
        let x = random_point(rng, dim);
        let mu = random_measure(rng, dim);
        let a = &actions[rng.random_range(0..actions.len())];
        let f = reward.running(t, &x, &mu, a);
        let g = reward.terminal(&x, &mu);
        if !f.is_finite() || !g.is_finite() {
            return Err(Error::NonFinite {
                what: "reward",
                step: 0,
                particle: 0,
            });
        }
        let scale = 1.0 + norm(&x) + mu.second_moment().sqrt();
        let ratio = (f.abs() + g.abs()) / scale;
        if ratio > mgrowth * (1.0 + 1e-8) {
            return Err(Error::Precondition(format!(
                "{}: declared growth constant {mgrowth} violated (ratio {ratio})",
                reward.name()
            )));
        }
        worst = worst.max(ratio);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn atoms(w: &[f64]) -> AtomSpace {
        AtomSpace::from_weights(w).unwrap()
    }

    #[test]
    fn law_of_examples() {
        let xi = InitialCondition::scalar(&[-1.0, 1.0]);
        let law = xi.law(&atoms(&[0.5, 0.5])).unwrap();
        assert_eq!(law.len(), 2);
        assert_eq!(law.point(0), &[-1.0]);
        assert_eq!(law.weight(0), 0.5);

        let zero = InitialCondition::scalar(&[0.0, 0.0, 0.0]);
        let law = zero.law(&atoms(&[0.2, 0.3, 0.5])).unwrap();
        assert_eq!(law.len(), 1);
        assert!((law.weight(0) - 1.0).abs() < 1e-15);

        let xi = InitialCondition::scalar(&[0.0, 0.0, 1.0]);
        let law = xi.law(&atoms(&[0.2, 0.3, 0.5])).unwrap();
        assert_eq!(law.len(), 2);
        assert!((law.weight(0) - 0.5).abs() < 1e-15);
        assert!((law.weight(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn law_of_permutation_invariant() {
        let xi = InitialCondition::scalar(&[0.3, -2.0, 0.3, 1.0]);
        let sp = atoms(&[0.1, 0.2, 0.3, 0.4]);
        let perm = [3, 1, 0, 2];
        let xi2 = xi.permuted(&perm).unwrap();
        let w2: Vec<f64> = perm.iter().map(|&p| sp.prob(p)).collect();
        let law1 = xi.law(&sp).unwrap();
        let law2 = xi2.law(&atoms(&w2)).unwrap();
        assert!(law1.same_law(&law2, 1e-15));
    }

    #[test]
    fn missing_atoms_rejected() {
        let xi = InitialCondition::scalar(&[0.0]);
        assert!(xi.law(&atoms(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn builtin_families_pass_spot_checks() {
        let reg = ModelRegistry::with_builtins();
        let actions = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let spec = FamilySpec {
            dims: Dims { d: 1, m: 1, n: 1 },
            params: &[0.1, -0.5, 0.7, 1.0, 0.3, 0.2, 0.4],
            action_bound: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = reg.coefficients("linear", &spec).unwrap();
        spot_check_lipschitz(c.as_ref(), &actions, 500, 1.0, &mut rng).unwrap();
        let c = reg.coefficients("intro", &spec).unwrap();
        spot_check_lipschitz(c.as_ref(), &actions, 500, 1.0, &mut rng).unwrap();

        let r = reg
            .reward("linear", &FamilySpec { params: &[0.5, 0.1, 0.2, 1.0, 0.7], ..spec.clone() })
            .unwrap();
        spot_check_growth(r.as_ref(), 1, &actions, 500, 1.0, &mut rng).unwrap();
        let r = reg
            .reward(
                "linear-quadratic",
                &FamilySpec { params: &[0.5, 0.1, 0.2, 1.0, 0.7, 0.3], ..spec.clone() },
            )
            .unwrap();
        spot_check_growth(r.as_ref(), 1, &actions, 500, 1.0, &mut rng).unwrap();
        for name in ["intro-min", "intro-max"] {
            let r = reg.reward(name, &spec).unwrap();
            spot_check_growth(r.as_ref(), 1, &actions, 500, 1.0, &mut rng).unwrap();
        }
    }

    #[test]
    fn understated_lipschitz_constant_is_caught() {
        let mut c = LinearCoefficients::from_params(&FamilySpec {
            dims: Dims { d: 1, m: 1, n: 1 },
            params: &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            action_bound: 1.0,
        })
        .unwrap();
        c.declared_lipschitz = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(spot_check_lipschitz(&c, &[vec![0.0]], 200, 1.0, &mut rng).is_err());
    }

    #[test]
    fn unknown_family() {
        let reg = ModelRegistry::with_builtins();
        let spec = FamilySpec {
            dims: Dims { d: 1, m: 1, n: 1 },
            params: &[],
            action_bound: 1.0,
        };
        assert!(matches!(
            reg.coefficients("nope", &spec),
            Err(Error::UnknownFamily(_))
        ));
    }
}
