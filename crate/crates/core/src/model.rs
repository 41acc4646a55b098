//! Problem definitions: time grids, one-step dynamics, nonlinearities,
//! terminal conditions, Lipschitz data and random-index laws.

use std::fmt;
use std::sync::Arc;

use crate::error::DomainError;
use crate::rand_streams::{derive_stream, Channel, MultiIndex, StreamKey};

/// `0 = t_0 < t_1 < … < t_K = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, DomainError> {
        if points.len() < 2 {
            return Err(DomainError::new("time grid needs at least two points"));
        }
        if points[0] != 0.0 {
            return Err(DomainError::new("time grid must start at 0"));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(DomainError::new("time grid points must be finite"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DomainError::new("time grid must be strictly increasing"));
        }
        Ok(TimeGrid { points })
    }

    /// `t_k = kT/K`.
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self, DomainError> {
        if steps == 0 {
            return Err(DomainError::new("step count K must be positive"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(DomainError::new(format!("horizon T must be positive, got {horizon}")));
        }
        let k = steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|i| i as f64 * horizon / k).collect();
        points[steps] = horizon;
        TimeGrid::new(points)
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.steps()]
    }

    pub fn t(&self, k: usize) -> f64 {
        self.points[k]
    }

    /// `t_{l+1} − t_l`.
    pub fn dt(&self, l: usize) -> f64 {
        self.points[l + 1] - self.points[l]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// `max{n : t_n ≤ t_k·u}` for `u ∈ (0, 1)`; always `< k`.
pub fn sample_index(grid: &TimeGrid, k: usize, u: f64) -> Result<usize, DomainError> {
    if k == 0 {
        return Err(DomainError::new("no index to sample at k = 0"));
    }
    if k > grid.steps() {
        return Err(DomainError::new(format!("k = {k} exceeds K = {}", grid.steps())));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(DomainError::new(format!("u = {u} not in (0, 1)")));
    }
    let target = grid.t(k) * u;
    // points[0] = 0 ≤ target, so the partition point is ≥ 1
    let n = grid.points[..k].partition_point(|&t| t <= target);
    Ok(n - 1)
}

pub type StepMap = Arc<dyn Fn(usize, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type Nonlinearity = Arc<dyn Fn(usize, &[f64], f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One-step maps `φ_l(x, w)` with a Gaussian noise sampler: step `l` consumes
/// `normals_per_step` i.i.d. `N(0, step_variance[l])` scalars.
#[derive(Clone)]
pub struct Dynamics {
    pub map: StepMap,
    pub normals_per_step: usize,
    pub step_variance: Vec<f64>,
}

impl Dynamics {
    /// `φ_l(x, w) = x + w` with `w ~ N(0, (t_{l+1} − t_l) I_d)`.
    pub fn brownian(d: usize, grid: &TimeGrid) -> Self {
        Dynamics {
            map: Arc::new(|_, x, w, out| {
                for ((o, xi), wi) in out.iter_mut().zip(x).zip(w) {
                    *o = xi + wi;
                }
            }),
            normals_per_step: d,
            step_variance: (0..grid.steps()).map(|l| grid.dt(l)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostExponents {
    pub alpha: f64,
    pub gamma: f64,
    pub p: f64,
}

/// Scalar nonlinearities shipped with the configuration registry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinearityKind {
    Zero,
    Constant { c: f64 },
    Affine { alpha: f64, beta: f64 },
    /// `scale·sin(a)`
    Sin { scale: f64 },
    /// `scale·cos(a)`
    ScaledCos { scale: f64 },
}

impl NonlinearityKind {
    pub fn eval(&self, a: f64) -> f64 {
        match *self {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Constant { c } => c,
            NonlinearityKind::Affine { alpha, beta } => alpha * a + beta,
            NonlinearityKind::Sin { scale } => scale * a.sin(),
            NonlinearityKind::ScaledCos { scale } => scale * a.cos(),
        }
    }

    /// The smallest valid Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            NonlinearityKind::Zero | NonlinearityKind::Constant { .. } => 0.0,
            NonlinearityKind::Affine { alpha, .. } => alpha.abs(),
            NonlinearityKind::Sin { scale } | NonlinearityKind::ScaledCos { scale } => scale.abs(),
        }
    }

    /// `(α, β)` with `f(a) = αa + β`, if the kind is affine.
    pub fn as_affine(&self) -> Option<(f64, f64)> {
        match *self {
            NonlinearityKind::Zero => Some((0.0, 0.0)),
            NonlinearityKind::Constant { c } => Some((0.0, c)),
            NonlinearityKind::Affine { alpha, beta } => Some((alpha, beta)),
            _ => None,
        }
    }

    pub fn to_fn(self) -> ScalarFn {
        Arc::new(move |a| self.eval(a))
    }
}

/// Terminal conditions shipped with the configuration registry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalKind {
    Constant { c: f64 },
    /// `|x|²`
    Quadratic,
    /// `exp(−|x|²/2)`
    GaussianBump,
}

impl TerminalKind {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            TerminalKind::Constant { c } => c,
            TerminalKind::Quadratic => x.iter().map(|v| v * v).sum(),
            TerminalKind::GaussianBump => (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp(),
        }
    }

    /// `E g(ξ + √s·Z)` with `Z ~ N(0, I_d)`, in closed form.
    pub fn mean_under_gaussian(&self, xi: &[f64], s: f64) -> f64 {
        match *self {
            TerminalKind::Constant { c } => c,
            TerminalKind::Quadratic => xi.iter().map(|v| v * v).sum::<f64>() + xi.len() as f64 * s,
            TerminalKind::GaussianBump => {
                let q = 1.0 + s;
                xi.iter().map(|m| (-0.5 * m * m / q).exp() / q.sqrt()).product()
            }
        }
    }

    /// `(E|g(ξ + √s·Z)|²)^{1/2}` with `Z ~ N(0, I_d)`, in closed form.
    pub fn l2_norm_under_gaussian(&self, xi: &[f64], s: f64) -> f64 {
        match *self {
            TerminalKind::Constant { c } => c.abs(),
            TerminalKind::Quadratic => {
                let d = xi.len() as f64;
                let r2: f64 = xi.iter().map(|v| v * v).sum();
                ((r2 + d * s).powi(2) + 4.0 * s * r2 + 2.0 * d * s * s).sqrt()
            }
            TerminalKind::GaussianBump => {
                // E exp(−X²) for X ~ N(μ, s) is exp(−μ²/(1+2s)) / √(1+2s)
                let q = 1.0 + 2.0 * s;
                xi.iter().map(|m| (-m * m / q).exp() / q.sqrt()).product::<f64>().sqrt()
            }
        }
    }

    pub fn to_fn(self) -> TerminalFn {
        Arc::new(move |x| self.eval(x))
    }
}

/// The scalar data of an exponential-Euler problem
/// `v_k(x) = E[v_{k−1}(x + ΔW) + Δt·f(v_{k−1}(x + ΔW))]`.
#[derive(Clone)]
pub struct ExpEuler {
    pub d: usize,
    pub grid: TimeGrid,
    pub f: ScalarFn,
    pub lipschitz_f: f64,
    pub v0: TerminalFn,
    /// Registry provenance, when known; enables closed-form moments.
    pub f_kind: Option<NonlinearityKind>,
    pub v0_kind: Option<TerminalKind>,
}

impl ExpEuler {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }
}

impl fmt::Debug for ExpEuler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExpEuler")
            .field("d", &self.d)
            .field("grid", &self.grid)
            .field("lipschitz_f", &self.lipschitz_f)
            .field("f_kind", &self.f_kind)
            .field("v0_kind", &self.v0_kind)
            .finish()
    }
}

/// One nested-expectation problem
/// `v_k(x) = E[f_{k−1}(X, v_{k−1}(X))]`, `X = φ_{k−1}(x, W_{k−1})`, `v_0 = g`.
///
/// Immutable after construction; all closures are pure.
#[derive(Clone)]
pub struct ProblemSpec {
    pub d: usize,
    pub grid: TimeGrid,
    pub dynamics: Dynamics,
    pub nonlinearity: Nonlinearity,
    pub terminal: TerminalFn,
    /// `L_0, …, L_{K−1}`
    pub lipschitz: Vec<f64>,
    pub eval_point: Vec<f64>,
    pub cost: CostExponents,
    pub exp_euler: Option<ExpEuler>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("d", &self.d)
            .field("grid", &self.grid)
            .field("normals_per_step", &self.dynamics.normals_per_step)
            .field("lipschitz", &self.lipschitz)
            .field("eval_point", &self.eval_point)
            .field("cost", &self.cost)
            .field("exp_euler", &self.exp_euler)
            .finish()
    }
}

impl ProblemSpec {
    /// Checks the structural invariants of a hand-assembled problem.
    pub fn validate(&self) -> Result<(), DomainError> {
        let k = self.grid.steps();
        if self.d == 0 {
            return Err(DomainError::new("dimension must be positive"));
        }
        if self.eval_point.len() != self.d {
            return Err(DomainError::new("evaluation point has wrong dimension"));
        }
        if self.lipschitz.len() != k {
            return Err(DomainError::new(format!("expected {k} Lipschitz constants, got {}", self.lipschitz.len())));
        }
        if self.lipschitz.iter().any(|l| !(*l >= 0.0)) {
            return Err(DomainError::new("Lipschitz constants must be nonnegative"));
        }
        if self.dynamics.step_variance.len() != k {
            return Err(DomainError::new("dynamics must declare one noise variance per step"));
        }
        if self.dynamics.step_variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(DomainError::new("noise variances must be nonnegative"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn lipschitz_sum(&self) -> f64 {
        self.lipschitz.iter().sum()
    }
}

/// Builds the exponential-Euler problem on the uniform grid `t_k = kT/K`:
/// `φ_k(x, w) = x + w`, `f_k(x, a) = a + Δt·f(a)`, `g = v0`, `L_k = Δt·L_f`.
pub fn make_exp_euler_problem(
    d: usize,
    steps: usize,
    horizon: f64,
    f: ScalarFn,
    lipschitz_f: f64,
    v0: TerminalFn,
) -> Result<ProblemSpec, DomainError> {
    let grid = TimeGrid::uniform(steps, horizon)?;
    exp_euler_on_grid(d, grid, f, lipschitz_f, v0)
}

/// Same as [`make_exp_euler_problem`] on an arbitrary grid.
pub fn exp_euler_on_grid(
    d: usize,
    grid: TimeGrid,
    f: ScalarFn,
    lipschitz_f: f64,
    v0: TerminalFn,
) -> Result<ProblemSpec, DomainError> {
    if d == 0 {
        return Err(DomainError::new("dimension must be positive"));
    }
    if !(lipschitz_f >= 0.0) {
        return Err(DomainError::new(format!("Lipschitz constant must be nonnegative, got {lipschitz_f}")));
    }
    let steps = grid.steps();
    let dts: Arc<Vec<f64>> = Arc::new((0..steps).map(|l| grid.dt(l)).collect());
    let weights = dts.clone();
    let fc = f.clone();
    let nonlinearity: Nonlinearity = Arc::new(move |k, _x, a| match weights.get(k) {
        Some(dt) => a + dt * fc(a),
        None => a,
    });
    Ok(ProblemSpec {
        d,
        dynamics: Dynamics::brownian(d, &grid),
        nonlinearity,
        terminal: v0.clone(),
        lipschitz: dts.iter().map(|dt| dt * lipschitz_f).collect(),
        eval_point: vec![0.0; d],
        cost: CostExponents { alpha: 0.0, gamma: 1.0, p: 1.0 },
        exp_euler: Some(ExpEuler { d, grid: grid.clone(), f, lipschitz_f, v0, f_kind: None, v0_kind: None }),
        grid,
    })
}

/// Registry-backed exponential-Euler problem; carries the kinds so closed-form
/// moments and oracles can use them.
pub fn make_registry_problem(
    d: usize,
    steps: usize,
    horizon: f64,
    f: NonlinearityKind,
    v0: TerminalKind,
) -> Result<ProblemSpec, DomainError> {
    let mut spec = make_exp_euler_problem(d, steps, horizon, f.to_fn(), f.lipschitz(), v0.to_fn())?;
    if let Some(ee) = spec.exp_euler.as_mut() {
        ee.f_kind = Some(f);
        ee.v0_kind = Some(v0);
    }
    Ok(spec)
}

/// The law of the random time index `𝓡_k` over `{0, …, k−1}` for
/// `k = 1, …, K`, with importance weights `𝔭_{k,l}` satisfying
/// `𝔭_{k,l}·P_k(l) = P_k(l)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexDistribution {
    pmf: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    grid: Option<TimeGrid>,
}

impl IndexDistribution {
    /// `P_k(l) = (t_{l+1} − t_l)/t_k`.
    pub fn from_grid(grid: &TimeGrid) -> Self {
        let pmf: Vec<Vec<f64>> = (1..=grid.steps())
            .map(|k| (0..k).map(|l| grid.dt(l) / grid.t(k)).collect())
            .collect();
        let weights = Self::weights_for(&pmf);
        IndexDistribution { pmf, weights, grid: Some(grid.clone()) }
    }

    /// An arbitrary law given row by row; row `k−1` has `k` entries.
    pub fn from_pmf(pmf: Vec<Vec<f64>>) -> Result<Self, DomainError> {
        for (i, row) in pmf.iter().enumerate() {
            let k = i + 1;
            if row.len() != k {
                return Err(DomainError::new(format!("row for k = {k} must have {k} entries")));
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(DomainError::new("probabilities must be nonnegative"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(DomainError::new(format!("row for k = {k} sums to {s}")));
            }
        }
        let weights = Self::weights_for(&pmf);
        Ok(IndexDistribution { pmf, weights, grid: None })
    }

    fn weights_for(pmf: &[Vec<f64>]) -> Vec<Vec<f64>> {
        pmf.iter().map(|row| row.iter().map(|&p| if p > 0.0 { p } else { 1.0 }).collect()).collect()
    }

    pub fn steps(&self) -> usize {
        self.pmf.len()
    }

    /// `P_k(l)`; zero for `l ≥ k`.
    pub fn prob(&self, k: usize, l: usize) -> f64 {
        if k == 0 || l >= k {
            return 0.0;
        }
        self.pmf[k - 1][l]
    }

    /// `𝔭_{k,l}`; one where `P_k(l) = 0`.
    pub fn weight(&self, k: usize, l: usize) -> f64 {
        if k == 0 || l >= k {
            return 1.0;
        }
        self.weights[k - 1][l]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.pmf[k - 1]
    }

    /// Draws `𝓡_k` from a uniform `u ∈ (0, 1)`.
    pub fn sample(&self, k: usize, u: f64) -> Result<usize, DomainError> {
        if let Some(grid) = &self.grid {
            return sample_index(grid, k, u);
        }
        if k == 0 || k > self.steps() {
            return Err(DomainError::new(format!("k = {k} outside 1..={}", self.steps())));
        }
        let row = &self.pmf[k - 1];
        let mut acc = 0.0;
        for (l, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(l);
            }
        }
        Ok(row.iter().rposition(|&p| p > 0.0).unwrap_or(k - 1))
    }

    /// Smallest `c` with `L_l ≤ c·P_k(l)` for all `l < k ≤ K`
    /// (infinite when some `L_l > 0` sits on a zero-probability atom).
    pub fn coupling_constant(&self, lipschitz: &[f64]) -> f64 {
        let mut c: f64 = 0.0;
        for k in 1..=self.steps() {
            for l in 0..k {
                let ll = lipschitz.get(l).copied().unwrap_or(0.0);
                if ll == 0.0 {
                    continue;
                }
                let p = self.prob(k, l);
                c = c.max(if p > 0.0 { ll / p } else { f64::INFINITY });
            }
        }
        c
    }

    /// `max_{k > l} L_l / 𝔭_{k,l}`.
    pub fn max_ratio(&self, lipschitz: &[f64]) -> f64 {
        let mut r: f64 = 0.0;
        for k in 1..=self.steps() {
            for l in 0..k {
                let ll = lipschitz.get(l).copied().unwrap_or(0.0);
                r = r.max(ll / self.weight(k, l));
            }
        }
        r
    }

    /// Largest `|𝔭_{k,l}·P_k(l) − P_k(l)²|` and largest row-sum defect.
    pub fn identity_defects(&self) -> (f64, f64) {
        let mut weight_defect: f64 = 0.0;
        let mut sum_defect: f64 = 0.0;
        for k in 1..=self.steps() {
            let row = self.row(k);
            sum_defect = sum_defect.max((row.iter().sum::<f64>() - 1.0).abs());
            for (l, &p) in row.iter().enumerate() {
                weight_defect = weight_defect.max((self.weight(k, l) * p - p * p).abs());
            }
        }
        (weight_defect, sum_defect)
    }
}

/// Pearson chi-square of `samples` draws of `𝓡_k` against `P_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexLawReport {
    pub k: usize,
    pub samples: u64,
    pub counts: Vec<u64>,
    pub chi_square: f64,
    /// Largest per-atom deviation in units of its binomial standard deviation.
    pub max_sigma: f64,
}

pub fn index_law_check(dist: &IndexDistribution, k: usize, samples: u64, seed: u64) -> Result<IndexLawReport, DomainError> {
    let mut counts = vec![0u64; k];
    let mut stream = derive_stream(&StreamKey::new(seed, MultiIndex::from(k as i64), Channel::Index));
    for _ in 0..samples {
        counts[dist.sample(k, stream.sample_uniform())?] += 1;
    }
    let n = samples as f64;
    let mut chi_square = 0.0;
    let mut max_sigma: f64 = 0.0;
    for (l, &c) in counts.iter().enumerate() {
        let p = dist.prob(k, l);
        let expected = n * p;
        if expected > 0.0 {
            chi_square += (c as f64 - expected).powi(2) / expected;
            let sd = (n * p * (1.0 - p)).sqrt();
            if sd > 0.0 {
                max_sigma = max_sigma.max((c as f64 - expected).abs() / sd);
            }
        } else if c > 0 {
            max_sigma = f64::INFINITY;
        }
    }
    Ok(IndexLawReport { k, samples, counts, chi_square, max_sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzViolation {
    pub k: usize,
    pub x: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub observed: f64,
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub probes: u64,
    pub violations: Vec<LipschitzViolation>,
}

impl LipschitzReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Range of the probed arguments `a, b`.
pub const LIPSCHITZ_PROBE_RANGE: f64 = 10.0;

/// Randomized spot check of `|(f_k(x,a) − a) − (f_k(x,b) − b)| ≤ L_k|a − b|`
/// with slack `1e−9·|a − b|`; `a, b` uniform on `[−10, 10]`, `x` standard normal.
pub fn validate_lipschitz(spec: &ProblemSpec, probes: u64, seed: u64) -> LipschitzReport {
    let steps = spec.steps();
    let mut violations = Vec::new();
    let mut stream = derive_stream(&StreamKey::new(seed, MultiIndex::from(-1), Channel::Index));
    let mut x = vec![0.0; spec.d];
    for _ in 0..probes {
        let k = ((stream.sample_uniform() * steps as f64) as usize).min(steps - 1);
        let a = LIPSCHITZ_PROBE_RANGE * (2.0 * stream.sample_uniform() - 1.0);
        let b = LIPSCHITZ_PROBE_RANGE * (2.0 * stream.sample_uniform() - 1.0);
        for xi in x.iter_mut() {
            *xi = crate::rand_streams::inverse_normal_cdf(stream.sample_uniform());
        }
        let fa = (spec.nonlinearity)(k, &x, a) - a;
        let fb = (spec.nonlinearity)(k, &x, b) - b;
        let observed = (fa - fb).abs();
        let allowed = (spec.lipschitz[k] + 1e-9) * (a - b).abs();
        if !(observed <= allowed) {
            violations.push(LipschitzViolation { k, x: x.clone(), a, b, observed, allowed });
        }
    }
    LipschitzReport { probes, violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.1, 0.5, 1.0]).is_ok());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::uniform(0, 1.0).is_err());
        assert!(TimeGrid::uniform(3, 0.0).is_err());
        assert!(TimeGrid::uniform(3, -1.0).is_err());
        let g = TimeGrid::uniform(10, 2.0).unwrap();
        assert_eq!(g.steps(), 10);
        assert_eq!(g.horizon(), 2.0);
    }

    #[test]
    fn grid_index_distribution_uniform() {
        let g = TimeGrid::uniform(10, 1.0).unwrap();
        let dist = IndexDistribution::from_grid(&g);
        for l in 0..4 {
            assert!((dist.prob(4, l) - 0.25).abs() < 1e-15);
        }
        assert_eq!(dist.prob(4, 4), 0.0);
        assert_eq!(dist.weight(4, 7), 1.0);
    }

    #[test]
    fn grid_index_distribution_nonuniform() {
        let g = TimeGrid::new(vec![0.0, 0.1, 0.5, 1.0]).unwrap();
        let dist = IndexDistribution::from_grid(&g);
        let expect = [0.1, 0.4, 0.5];
        for (l, e) in expect.iter().enumerate() {
            assert!((dist.prob(3, l) - e).abs() < 1e-15);
        }
        for k in 1..=3 {
            assert!((dist.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (wd, sd) = dist.identity_defects();
        assert!(wd < 1e-16 && sd < 1e-12);
    }

    #[test]
    fn sample_index_examples() {
        let g = TimeGrid::uniform(10, 1.0).unwrap();
        assert_eq!(sample_index(&g, 4, 0.5).unwrap(), 2);
        assert_eq!(sample_index(&g, 4, 0.999).unwrap(), 3);
        assert_eq!(sample_index(&g, 4, 1e-12).unwrap(), 0);
        let g2 = TimeGrid::new(vec![0.0, 0.1, 0.5, 1.0]).unwrap();
        assert_eq!(sample_index(&g2, 3, 0.3).unwrap(), 1);
        assert!(sample_index(&g, 0, 0.5).is_err());
        assert!(sample_index(&g, 11, 0.5).is_err());
    }

    #[test]
    fn index_law_matches_pmf() {
        let g = TimeGrid::new(vec![0.0, 0.1, 0.5, 1.0, 1.2, 2.0]).unwrap();
        let dist = IndexDistribution::from_grid(&g);
        for k in 1..=5 {
            let rep = index_law_check(&dist, k, 1_000_000, 9).unwrap();
            assert!(rep.max_sigma < 4.0, "k={k}: {rep:?}");
        }
    }

    #[test]
    fn tabulated_distribution_sampling() {
        let dist = IndexDistribution::from_pmf(vec![vec![1.0], vec![0.0, 1.0], vec![0.2, 0.0, 0.8]]).unwrap();
        assert_eq!(dist.weight(2, 0), 1.0);
        assert_eq!(dist.sample(3, 0.1).unwrap(), 0);
        assert_eq!(dist.sample(3, 0.5).unwrap(), 2);
        assert_eq!(dist.sample(2, 0.01).unwrap(), 1);
        assert!(IndexDistribution::from_pmf(vec![vec![0.5]]).is_err());
        assert!(IndexDistribution::from_pmf(vec![vec![1.0], vec![1.0]]).is_err());
        // L_0 > 0 on a zero-probability atom cannot be coupled
        assert!(dist.coupling_constant(&[1.0, 0.0, 0.0]).is_infinite());
        assert!(dist.coupling_constant(&[0.0, 0.5, 0.0]).is_infinite());
        assert!((dist.coupling_constant(&[0.0, 0.0, 0.3]) - 0.375).abs() < 1e-15);
        let spread = IndexDistribution::from_pmf(vec![vec![1.0], vec![0.5, 0.5], vec![0.25, 0.25, 0.5]]).unwrap();
        assert!((spread.coupling_constant(&[0.1, 0.2, 0.0]) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn exp_euler_wrapping() {
        let spec = make_registry_problem(2, 4, 2.0, NonlinearityKind::Affine { alpha: 0.5, beta: 1.0 }, TerminalKind::Quadratic)
            .unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.dynamics.normals_per_step, 2);
        assert_eq!(spec.cost, CostExponents { alpha: 0.0, gamma: 1.0, p: 1.0 });
        assert_eq!(NonlinearityKind::Constant { c: 2.0 }.as_affine(), Some((0.0, 2.0)));
        assert_eq!(NonlinearityKind::Sin { scale: 1.0 }.as_affine(), None);
        // f_1(x, a) = a + 0.5·(0.5a + 1)
        assert!(((spec.nonlinearity)(1, &[0.0, 0.0], 2.0) - 3.0).abs() < 1e-15);
        assert_eq!((spec.terminal)(&[1.0, 2.0]), 5.0);
        let mut out = [0.0; 2];
        (spec.dynamics.map)(0, &[1.0, 1.0], &[0.5, -0.5], &mut out);
        assert_eq!(out, [1.5, 0.5]);
        assert!((spec.lipschitz_sum() - 2.0 * 0.5).abs() < 1e-15);
        assert!(make_exp_euler_problem(1, 0, 1.0, NonlinearityKind::Zero.to_fn(), 0.0, TerminalKind::Quadratic.to_fn()).is_err());
        assert!(make_exp_euler_problem(1, 3, 0.0, NonlinearityKind::Zero.to_fn(), 0.0, TerminalKind::Quadratic.to_fn()).is_err());
    }

    #[test]
    fn lipschitz_sum_is_horizon_times_lf() {
        for &(k, t, lf) in &[(10usize, 1.0, 0.5), (7, 3.0, 2.0), (16, 0.5, 1.0)] {
            let spec = make_registry_problem(1, k, t, NonlinearityKind::Sin { scale: lf }, TerminalKind::Constant { c: 1.0 }).unwrap();
            assert!((spec.lipschitz_sum() - t * lf).abs() < 1e-14);
        }
    }

    #[test]
    fn lipschitz_probing() {
        let affine = make_registry_problem(1, 10, 1.0, NonlinearityKind::Affine { alpha: 0.5, beta: 0.0 }, TerminalKind::Constant { c: 1.0 }).unwrap();
        assert!(validate_lipschitz(&affine, 10_000, 1).passed());

        let sin = make_registry_problem(1, 10, 1.0, NonlinearityKind::Sin { scale: 1.0 }, TerminalKind::Constant { c: 1.0 }).unwrap();
        assert!(validate_lipschitz(&sin, 10_000, 1).passed());

        let square = make_exp_euler_problem(1, 10, 1.0, Arc::new(|a| a * a), 1.0, TerminalKind::Constant { c: 1.0 }.to_fn()).unwrap();
        assert!(!validate_lipschitz(&square, 1_000, 1).passed());

        let halved = make_exp_euler_problem(1, 10, 1.0, NonlinearityKind::Affine { alpha: 0.5, beta: 0.0 }.to_fn(), 0.25, TerminalKind::Constant { c: 1.0 }.to_fn()).unwrap();
        assert!(!validate_lipschitz(&halved, 1_000, 1).passed());
    }

    #[test]
    fn coupling_for_exp_euler_is_lt() {
        let spec = make_registry_problem(1, 8, 2.0, NonlinearityKind::Affine { alpha: 0.75, beta: 0.0 }, TerminalKind::Constant { c: 1.0 }).unwrap();
        let dist = IndexDistribution::from_grid(&spec.grid);
        // L_l / P_k(l) = Δt·L_f·t_k/Δt ≤ T·L_f
        assert!((dist.coupling_constant(&spec.lipschitz) - 1.5).abs() < 1e-14);
        assert!((dist.max_ratio(&spec.lipschitz) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn terminal_moments_closed_form() {
        // Monte Carlo check of the closed-form first and second moments
        let mut s = derive_stream(&StreamKey::new(5, MultiIndex::root(), Channel::Brownian));
        let xi = [0.3, -0.7];
        let var = 0.8;
        let n = 400_000;
        for kind in [TerminalKind::Quadratic, TerminalKind::GaussianBump, TerminalKind::Constant { c: -2.0 }] {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            let mut g1 = 0.0;
            for _ in 0..n {
                let mut x = xi.to_vec();
                s.add_gaussian(&mut x, var).unwrap();
                let g = kind.eval(&x);
                g1 += g;
                acc += g * g;
                acc2 += g.powi(4);
            }
            let m1 = g1 / n as f64;
            let se1 = ((acc / n as f64 - m1 * m1) / n as f64).sqrt();
            let exact1 = kind.mean_under_gaussian(&xi, var);
            assert!((m1 - exact1).abs() <= 5.0 * se1 + 1e-12, "{kind:?}: {m1} vs {exact1}");
            let mean = acc / n as f64;
            let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
            let exact = kind.l2_norm_under_gaussian(&xi, var).powi(2);
            assert!((mean - exact).abs() <= 5.0 * se + 1e-12, "{kind:?}: {mean} vs {exact}");
        }
    }
}
