//! Full-history recursive multilevel Picard estimators.
//!
//! Two entry points share the same structure:
//!
//! * [`mlp_general`] evaluates the scheme for an arbitrary [`ProblemSpec`]:
//!   state paths are simulated step by step through the declared dynamics and
//!   every correction sample is reweighted by `1/𝔭_{k,𝓡}`.
//! * [`mlp_exp_euler`] is the exponential-Euler specialisation. Each sample
//!   draws a single `d`-dimensional Gaussian increment, and the correction
//!   brackets reduce to `t_k·[f(V_j) − f(V_{j−1})]`.
//!
//! Stream layout, per multi-index `ϑ` of a sample:
//!
//! * Brownian channel of `ϑ`: step `l` of a general path reads its noise at
//!   word offset `l·normals_per_step`; the fast path reads its single
//!   increment from offset 0.
//! * Index channel of `ϑ`: one uniform at offset 0, used to draw `𝓡`.
//!
//! The top-level sample loops may run on a worker pool; per-sample results
//! are collected and summed in ascending `m` within a level, and levels are
//! summed in ascending `j`, so the value is bit-identical for any worker
//! count.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{DomainError, MlpError};
use crate::model::{sample_index, ExpEuler, IndexDistribution, ProblemSpec};
use crate::rand_streams::{derive_stream, Channel, CostLedger, MultiIndex, Stream, StreamKey};

/// Default cap on predicted draws for a single estimate.
pub const DEFAULT_MAX_SAMPLES: u64 = 5_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpParams {
    /// Branching base `M ≥ 1`.
    pub m: u64,
    /// Level count `n`.
    pub n: u32,
    pub seed: u64,
    /// Refuse estimates whose predicted draw count exceeds this.
    pub max_total_samples: u64,
    /// Worker count for the top-level sample loops.
    pub parallel_width: usize,
}

impl MlpParams {
    pub fn new(m: u64, n: u32, seed: u64) -> Self {
        MlpParams { m, n, seed, max_total_samples: DEFAULT_MAX_SAMPLES, parallel_width: 1 }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.parallel_width = width;
        self
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.max_total_samples = cap;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamsEcho {
    pub d: usize,
    pub steps: usize,
    pub m: u64,
    pub n: u32,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub ledger: CostLedger,
    pub params_echo: ParamsEcho,
}

/// Predicted draw counts of one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PredictedCost {
    pub normals: u128,
    pub uniforms: u128,
}

impl PredictedCost {
    pub fn total(&self) -> u128 {
        self.normals + self.uniforms
    }
}

fn overflow(m: u64, n: u32, per_sample: f64) -> MlpError {
    MlpError::Overflow { magnitude: per_sample * (3.0 * m as f64).powi(n as i32) }
}

/// Evaluates
/// `C(n) = b·Mⁿ + Σ_{j=1}^{n−1} M^{n−j}(c + 1 + C(j) + C(j−1))`
/// split into normals (`b`, `c` per sample) and uniforms (the `+1`).
fn cost_recursion(m: u64, n: u32, base_normals: u128, correction_normals: u128) -> Result<PredictedCost, MlpError> {
    let err = || overflow(m, n, base_normals.max(correction_normals).max(1) as f64);
    let mm = m as u128;
    let mut normals: Vec<u128> = Vec::with_capacity(n as usize + 1);
    let mut uniforms: Vec<u128> = Vec::with_capacity(n as usize + 1);
    for level in 0..=n {
        if level == 0 {
            normals.push(0);
            uniforms.push(0);
            continue;
        }
        let mut cn = mm.checked_pow(level).and_then(|p| p.checked_mul(base_normals)).ok_or_else(err)?;
        let mut cu: u128 = 0;
        for j in 1..level {
            let w = mm.checked_pow(level - j).ok_or_else(err)?;
            let jn = correction_normals
                .checked_add(normals[j as usize])
                .and_then(|v| v.checked_add(normals[j as usize - 1]))
                .and_then(|v| v.checked_mul(w))
                .ok_or_else(err)?;
            let ju = 1u128
                .checked_add(uniforms[j as usize])
                .and_then(|v| v.checked_add(uniforms[j as usize - 1]))
                .and_then(|v| v.checked_mul(w))
                .ok_or_else(err)?;
            cn = cn.checked_add(jn).ok_or_else(err)?;
            cu = cu.checked_add(ju).ok_or_else(err)?;
        }
        normals.push(cn);
        uniforms.push(cu);
    }
    let out = PredictedCost { normals: normals[n as usize], uniforms: uniforms[n as usize] };
    out.normals.checked_add(out.uniforms).ok_or_else(err)?;
    Ok(out)
}

/// Exact draw count of one [`mlp_exp_euler`] call:
/// `C(n) = d·Mⁿ + Σ_{j=1}^{n−1} M^{n−j}(d + 1 + C(j) + C(j−1))`,
/// where the `+1` is the uniform behind the random time index.
pub fn cost_predict(d: usize, m: u64, n: u32) -> Result<PredictedCost, MlpError> {
    cost_recursion(m, n, d as u128, d as u128)
}

/// Upper bound on the draw count of one [`mlp_general`] call with `k ≤ steps`:
/// each base sample simulates two full paths and each correction sample at
/// most one.
pub fn cost_predict_general(steps: usize, per_step_normals: usize, m: u64, n: u32) -> Result<PredictedCost, MlpError> {
    let path = (steps as u128) * (per_step_normals as u128);
    cost_recursion(m, n, 2 * path, path)
}

fn check_budget(predicted: PredictedCost, cap: u64) -> Result<(), MlpError> {
    if predicted.total() > cap as u128 {
        return Err(MlpError::Budget { predicted: predicted.total(), cap });
    }
    Ok(())
}

fn validate_params(params: &MlpParams, k: usize, steps: usize) -> Result<(), DomainError> {
    if params.m == 0 {
        return Err(DomainError::new("branching base M must be at least 1"));
    }
    if k > steps {
        return Err(DomainError::new(format!("k = {k} exceeds K = {steps}")));
    }
    Ok(())
}

/// `X^{θ,k,x}_l`: iterates `X_s = φ_s(X_{s+1}, W^θ_s)` from `s = k−1` down to
/// `s = l`, reading step `s`'s noise at offset `s·normals_per_step` of the
/// Brownian stream of `θ`.
pub fn simulate_x(
    spec: &ProblemSpec,
    seed: u64,
    theta: &MultiIndex,
    k: usize,
    l: usize,
    x: &[f64],
) -> Result<(Vec<f64>, CostLedger), DomainError> {
    if l > k {
        return Err(DomainError::new(format!("target index l = {l} exceeds k = {k}")));
    }
    if k > spec.steps() {
        return Err(DomainError::new(format!("k = {k} exceeds K = {}", spec.steps())));
    }
    if x.len() != spec.d {
        return Err(DomainError::new("starting point has wrong dimension"));
    }
    let mut walker = PathWalker::new(spec, seed, theta, k, x);
    while walker.index > l {
        walker.step()?;
    }
    Ok((walker.state.clone(), walker.ledger()))
}

/// Lazily simulated path `X^{θ,k,x}_k, X^{θ,k,x}_{k−1}, …`.
struct PathWalker<'a> {
    spec: &'a ProblemSpec,
    stream: Option<Stream>,
    key: StreamKey,
    index: usize,
    state: Vec<f64>,
    next: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> PathWalker<'a> {
    fn new(spec: &'a ProblemSpec, seed: u64, theta: &MultiIndex, k: usize, x: &[f64]) -> Self {
        PathWalker {
            spec,
            stream: None,
            key: StreamKey::new(seed, theta.clone(), Channel::Brownian),
            index: k,
            state: x.to_vec(),
            next: vec![0.0; x.len()],
            noise: vec![0.0; spec.dynamics.normals_per_step],
        }
    }

    fn step(&mut self) -> Result<(), DomainError> {
        let s = self.index - 1;
        let per_step = self.spec.dynamics.normals_per_step;
        let stream = self.stream.get_or_insert_with(|| derive_stream(&self.key));
        stream.seek((s * per_step) as u64);
        stream.fill_gaussian(&mut self.noise, self.spec.dynamics.step_variance[s])?;
        (self.spec.dynamics.map)(s, &self.state, &self.noise, &mut self.next);
        std::mem::swap(&mut self.state, &mut self.next);
        self.index = s;
        Ok(())
    }

    fn ledger(&self) -> CostLedger {
        self.stream.as_ref().map(|s| s.ledger()).unwrap_or_default()
    }
}

/// Per-sample work item at the top level: level `j` (0 = base) and sample `m`.
#[derive(Clone, Copy)]
struct Task {
    level: u32,
    m: u64,
}

fn tasks(m: u64, n: u32) -> Vec<Task> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    for level in 0..n {
        let count = m.pow(n - level);
        out.extend((1..=count).map(|mi| Task { level, m: mi }));
    }
    out
}

/// Runs the per-sample closure over all top-level tasks and assembles
/// `Σ_j (1/M^{n−j}) Σ_m sample(j, m)` in fixed order.
fn run_top_level<F>(m: u64, n: u32, width: usize, sample: F) -> Result<(f64, CostLedger), MlpError>
where
    F: Fn(Task) -> Result<(f64, CostLedger), MlpError> + Sync,
{
    let work = tasks(m, n);
    let results: Vec<Result<(f64, CostLedger), MlpError>> = if width > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(width)
            .build()
            .map_err(|e| DomainError::new(format!("cannot start worker pool: {e}")))?;
        pool.install(|| work.par_iter().map(|&t| sample(t)).collect())
    } else {
        work.iter().map(|&t| sample(t)).collect()
    };
    let mut value = 0.0;
    let mut ledger = CostLedger::default();
    let mut it = results.into_iter();
    for level in 0..n {
        let count = m.pow(n - level);
        let mut acc = 0.0;
        for _ in 0..count {
            let (v, l) = it.next().expect("task count mismatch")?;
            acc += v;
            ledger.merge(&l);
        }
        value += acc / count as f64;
    }
    Ok((value, ledger))
}

// ---------------------------------------------------------------------------
// general scheme

struct GeneralCtx<'a> {
    spec: &'a ProblemSpec,
    dist: &'a IndexDistribution,
    seed: u64,
    m: u64,
}

impl GeneralCtx<'_> {
    fn value(&self, theta: &MultiIndex, k: usize, n: u32, x: &[f64], ledger: &mut CostLedger) -> Result<f64, MlpError> {
        if n == 0 {
            return Ok(0.0);
        }
        let mut value = 0.0;
        for level in 0..n {
            let count = self.m.pow(n - level);
            let mut acc = 0.0;
            for mi in 1..=count {
                let (v, l) = self.sample(theta, k, level, mi, x)?;
                acc += v;
                ledger.merge(&l);
            }
            value += acc / count as f64;
        }
        Ok(value)
    }

    fn sample(&self, theta: &MultiIndex, k: usize, level: u32, mi: u64, x: &[f64]) -> Result<(f64, CostLedger), MlpError> {
        if level == 0 {
            self.base_sample(theta, k, mi, x)
        } else {
            self.correction_sample(theta, k, level, mi, x)
        }
    }

    /// `g(X^{(θ,0,−m),k,x}_0) + Σ_{l<k} f_l(X^{(θ,0,m),k,x}_l, 0)`
    fn base_sample(&self, theta: &MultiIndex, k: usize, mi: u64, x: &[f64]) -> Result<(f64, CostLedger), MlpError> {
        let mut ledger = CostLedger::default();
        let mut terminal_path = PathWalker::new(self.spec, self.seed, &theta.child(0, -(mi as i64)), k, x);
        while terminal_path.index > 0 {
            terminal_path.step()?;
        }
        ledger.merge(&terminal_path.ledger());
        let mut value = (self.spec.terminal)(&terminal_path.state);

        let mut f_path = PathWalker::new(self.spec, self.seed, &theta.child(0, mi as i64), k, x);
        let mut f_sum = 0.0;
        while f_path.index > 0 {
            f_path.step()?;
            f_sum += (self.spec.nonlinearity)(f_path.index, &f_path.state, 0.0);
        }
        ledger.merge(&f_path.ledger());
        value += f_sum;
        Ok((value, ledger))
    }

    /// `[(f_𝓡(X, V_j) − V_j) − (f_𝓡(X, V_{j−1}) − V_{j−1})] / 𝔭_{k,𝓡}`
    fn correction_sample(&self, theta: &MultiIndex, k: usize, level: u32, mi: u64, x: &[f64]) -> Result<(f64, CostLedger), MlpError> {
        let mut ledger = CostLedger::default();
        if k == 0 {
            return Ok((0.0, ledger));
        }
        let plus = theta.child(level as i64, mi as i64);
        let minus = theta.child(level as i64, -(mi as i64));
        let mut index_stream = derive_stream(&StreamKey::new(self.seed, plus.clone(), Channel::Index));
        let r = self.dist.sample(k, index_stream.sample_uniform())?;
        ledger.merge(&index_stream.ledger());

        let mut path = PathWalker::new(self.spec, self.seed, &plus, k, x);
        while path.index > r {
            path.step()?;
        }
        ledger.merge(&path.ledger());
        let xr = path.state;

        let fine = self.value(&plus, r, level, &xr, &mut ledger)?;
        let coarse = self.value(&minus, r, level - 1, &xr, &mut ledger)?;
        let f = &self.spec.nonlinearity;
        let bracket = (f(r, &xr, fine) - fine) - (f(r, &xr, coarse) - coarse);
        Ok((bracket / self.dist.weight(k, r), ledger))
    }
}

/// One realisation of `V^θ_{k,n}(x)` for a general problem.
///
/// The predicted upper bound on draws ([`cost_predict_general`]) is checked
/// against `params.max_total_samples` before anything is sampled.
pub fn mlp_general(
    spec: &ProblemSpec,
    dist: &IndexDistribution,
    theta: &MultiIndex,
    k: usize,
    x: &[f64],
    params: &MlpParams,
) -> Result<Estimate, MlpError> {
    validate_params(params, k, spec.steps())?;
    if x.len() != spec.d {
        return Err(DomainError::new("evaluation point has wrong dimension").into());
    }
    if dist.steps() < k {
        return Err(DomainError::new("index distribution does not cover k").into());
    }
    let predicted = cost_predict_general(k, spec.dynamics.normals_per_step, params.m, params.n)?;
    check_budget(predicted, params.max_total_samples)?;

    let start = Instant::now();
    let ctx = GeneralCtx { spec, dist, seed: params.seed, m: params.m };
    let (value, mut ledger) =
        run_top_level(params.m, params.n, params.parallel_width, |t| ctx.sample(theta, k, t.level, t.m, x))?;
    ledger.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(Estimate {
        value,
        ledger,
        params_echo: ParamsEcho { d: spec.d, steps: spec.steps(), m: params.m, n: params.n, k, seed: params.seed },
    })
}

// ---------------------------------------------------------------------------
// exponential-Euler fast path

struct ExpEulerCtx<'a> {
    ee: &'a ExpEuler,
    seed: u64,
    m: u64,
    f_at_zero: f64,
}

impl ExpEulerCtx<'_> {
    fn value(&self, theta: &MultiIndex, k: usize, n: u32, x: &[f64], ledger: &mut CostLedger) -> Result<f64, MlpError> {
        if n == 0 {
            return Ok(0.0);
        }
        let mut value = 0.0;
        for level in 0..n {
            let count = self.m.pow(n - level);
            let mut acc = 0.0;
            for mi in 1..=count {
                let (v, l) = self.sample(theta, k, level, mi, x)?;
                acc += v;
                ledger.merge(&l);
            }
            value += acc / count as f64;
        }
        Ok(value)
    }

    fn sample(&self, theta: &MultiIndex, k: usize, level: u32, mi: u64, x: &[f64]) -> Result<(f64, CostLedger), MlpError> {
        if level == 0 {
            self.base_sample(theta, k, mi, x)
        } else {
            self.correction_sample(theta, k, level, mi, x)
        }
    }

    /// `v_0(x + W^{(θ,0,−m)}_{t_k}) + t_k·f(0)`
    fn base_sample(&self, theta: &MultiIndex, k: usize, mi: u64, x: &[f64]) -> Result<(f64, CostLedger), MlpError> {
        let tk = self.ee.grid.t(k);
        let mut stream = derive_stream(&StreamKey::new(self.seed, theta.child(0, -(mi as i64)), Channel::Brownian));
        let mut y = x.to_vec();
        stream.add_gaussian(&mut y, tk)?;
        Ok(((self.ee.v0)(&y) + tk * self.f_at_zero, stream.ledger()))
    }

    /// `t_k·[f(V^{(θ,j,m)}_{l,j}(y)) − f(V^{(θ,j,−m)}_{l,j−1}(y))]` with
    /// `l = 𝓡_k` and `y = x + W_{t_k} − W_{t_l}`. At `k = 0` the bracket is
    /// still evaluated (with `l = 0` and a zero-variance increment) so the
    /// draw count does not depend on `k`.
    fn correction_sample(&self, theta: &MultiIndex, k: usize, level: u32, mi: u64, x: &[f64]) -> Result<(f64, CostLedger), MlpError> {
        let mut ledger = CostLedger::default();
        let plus = theta.child(level as i64, mi as i64);
        let minus = theta.child(level as i64, -(mi as i64));
        let mut index_stream = derive_stream(&StreamKey::new(self.seed, plus.clone(), Channel::Index));
        let u = index_stream.sample_uniform();
        ledger.merge(&index_stream.ledger());
        let l = if k == 0 { 0 } else { sample_index(&self.ee.grid, k, u)? };

        let tk = self.ee.grid.t(k);
        let mut stream = derive_stream(&StreamKey::new(self.seed, plus.clone(), Channel::Brownian));
        let mut y = x.to_vec();
        stream.add_gaussian(&mut y, tk - self.ee.grid.t(l))?;
        ledger.merge(&stream.ledger());

        let fine = self.value(&plus, l, level, &y, &mut ledger)?;
        let coarse = self.value(&minus, l, level - 1, &y, &mut ledger)?;
        Ok((tk * ((self.ee.f)(fine) - (self.ee.f)(coarse)), ledger))
    }
}

/// One realisation of the exponential-Euler MLP estimator
/// `V^θ_{k,n,M}(x)`.
///
/// The ledger of the returned estimate equals [`cost_predict`] exactly.
pub fn mlp_exp_euler(ee: &ExpEuler, theta: &MultiIndex, k: usize, x: &[f64], params: &MlpParams) -> Result<Estimate, MlpError> {
    validate_params(params, k, ee.steps())?;
    if x.len() != ee.d {
        return Err(DomainError::new("evaluation point has wrong dimension").into());
    }
    let predicted = cost_predict(ee.d, params.m, params.n)?;
    check_budget(predicted, params.max_total_samples)?;

    let start = Instant::now();
    let ctx = ExpEulerCtx { ee, seed: params.seed, m: params.m, f_at_zero: (ee.f)(0.0) };
    let (value, mut ledger) =
        run_top_level(params.m, params.n, params.parallel_width, |t| ctx.sample(theta, k, t.level, t.m, x))?;
    ledger.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(Estimate {
        value,
        ledger,
        params_echo: ParamsEcho { d: ee.d, steps: ee.steps(), m: params.m, n: params.n, k, seed: params.seed },
    })
}

/// Convenience: `V^{(0)}_{K,n,M}(ξ)` for an exponential-Euler problem.
pub fn estimate_at_horizon(spec: &ProblemSpec, params: &MlpParams) -> Result<Estimate, MlpError> {
    match &spec.exp_euler {
        Some(ee) => mlp_exp_euler(ee, &MultiIndex::root(), spec.steps(), &spec.eval_point, params),
        None => {
            let dist = IndexDistribution::from_grid(&spec.grid);
            mlp_general(spec, &dist, &MultiIndex::root(), spec.steps(), &spec.eval_point, params)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{make_registry_problem, CostExponents, Dynamics, NonlinearityKind, TerminalKind, TimeGrid};

    fn affine_problem() -> ProblemSpec {
        make_registry_problem(1, 10, 1.0, NonlinearityKind::Affine { alpha: 0.5, beta: 0.0 }, TerminalKind::Constant { c: 1.0 })
            .unwrap()
    }

    #[test]
    fn cost_predict_examples() {
        assert_eq!(cost_predict(3, 4, 0).unwrap(), PredictedCost::default());
        for d in 1..5 {
            for m in 1..5 {
                assert_eq!(cost_predict(d, m, 1).unwrap(), PredictedCost { normals: (d as u128) * m as u128, uniforms: 0 });
            }
        }
        let c = cost_predict(2, 3, 2).unwrap();
        assert_eq!(c, PredictedCost { normals: 42, uniforms: 3 });
        assert_eq!(c.total(), 45);
    }

    #[test]
    fn cost_predict_overflow_refused() {
        match cost_predict(100, 1000, 40) {
            Err(MlpError::Overflow { magnitude }) => assert!(magnitude > 1e38),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn budget_refusal_happens_before_sampling() {
        let spec = affine_problem();
        let ee = spec.exp_euler.as_ref().unwrap();
        let params = MlpParams::new(4, 4, 1).with_cap(100);
        match mlp_exp_euler(ee, &MultiIndex::root(), 10, &[0.0], &params) {
            Err(MlpError::Budget { predicted, cap }) => {
                assert_eq!(cap, 100);
                assert_eq!(predicted, cost_predict(1, 4, 4).unwrap().total());
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn level_zero_is_empty() {
        let spec = affine_problem();
        let ee = spec.exp_euler.as_ref().unwrap();
        let dist = IndexDistribution::from_grid(&spec.grid);
        for &(k, m) in &[(0usize, 1u64), (3, 2), (10, 5)] {
            let p = MlpParams::new(m, 0, 3);
            let a = mlp_exp_euler(ee, &MultiIndex::root(), k, &[0.0], &p).unwrap();
            let b = mlp_general(&spec, &dist, &MultiIndex::root(), k, &[0.0], &p).unwrap();
            assert_eq!(a.value, 0.0);
            assert_eq!(b.value, 0.0);
            assert_eq!(a.ledger.draws(), 0);
            assert_eq!(b.ledger.draws(), 0);
        }
    }

    #[test]
    fn k_zero_returns_terminal() {
        let spec = make_registry_problem(2, 5, 1.0, NonlinearityKind::Sin { scale: 0.7 }, TerminalKind::GaussianBump).unwrap();
        let ee = spec.exp_euler.as_ref().unwrap();
        let dist = IndexDistribution::from_grid(&spec.grid);
        let x = [0.4, -1.1];
        let g = TerminalKind::GaussianBump.eval(&x);
        let mut first = None;
        for seed in 0..5 {
            let p = MlpParams::new(3, 3, seed);
            // f(0) = 0, so the base level is g(x) exactly
            let a = mlp_exp_euler(ee, &MultiIndex::root(), 0, &x, &p).unwrap();
            let b = mlp_general(&spec, &dist, &MultiIndex::root(), 0, &x, &p).unwrap();
            assert!((a.value - g).abs() < 1e-14, "{} vs {g}", a.value);
            assert!((b.value - g).abs() < 1e-14);
            assert_eq!(*first.get_or_insert(a.value.to_bits()), a.value.to_bits());
        }
    }

    #[test]
    fn identity_nonlinearity_gives_terminal_constant() {
        let spec = make_registry_problem(3, 6, 1.5, NonlinearityKind::Zero, TerminalKind::Constant { c: 2.5 }).unwrap();
        let ee = spec.exp_euler.as_ref().unwrap();
        let dist = IndexDistribution::from_grid(&spec.grid);
        for &(k, n, m) in &[(6usize, 3u32, 2u64), (4, 2, 3), (1, 4, 2)] {
            let p = MlpParams::new(m, n, 11);
            let a = mlp_exp_euler(ee, &MultiIndex::root(), k, &[0.0; 3], &p).unwrap();
            let b = mlp_general(&spec, &dist, &MultiIndex::root(), k, &[0.0; 3], &p).unwrap();
            assert!((a.value - 2.5).abs() < 1e-14);
            assert!((b.value - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn measured_cost_equals_prediction() {
        for d in [1usize, 2, 3] {
            let spec = make_registry_problem(d, 4, 1.0, NonlinearityKind::Sin { scale: 1.0 }, TerminalKind::Quadratic).unwrap();
            let ee = spec.exp_euler.as_ref().unwrap();
            for m in 1..=3u64 {
                for n in 0..=3u32 {
                    let est = mlp_exp_euler(ee, &MultiIndex::root(), 4, &vec![0.0; d], &MlpParams::new(m, n, 5)).unwrap();
                    let pred = cost_predict(d, m, n).unwrap();
                    assert_eq!(est.ledger.normals as u128, pred.normals);
                    assert_eq!(est.ledger.uniforms as u128, pred.uniforms);
                }
            }
        }
    }

    #[test]
    fn general_cost_within_bound() {
        let spec = make_registry_problem(2, 5, 1.0, NonlinearityKind::Sin { scale: 1.0 }, TerminalKind::Quadratic).unwrap();
        let dist = IndexDistribution::from_grid(&spec.grid);
        for m in 1..=3u64 {
            for n in 0..=3u32 {
                let est = mlp_general(&spec, &dist, &MultiIndex::root(), 5, &[0.0; 2], &MlpParams::new(m, n, 1)).unwrap();
                let bound = cost_predict_general(5, 2, m, n).unwrap();
                assert!(est.ledger.normals as u128 <= bound.normals);
                assert!(est.ledger.uniforms as u128 <= bound.uniforms);
            }
        }
    }

    #[test]
    fn simulate_x_examples() {
        // φ(x, w) = x + w
        let grid = TimeGrid::uniform(4, 1.0).unwrap();
        let spec = ProblemSpec {
            d: 1,
            dynamics: Dynamics::brownian(1, &grid),
            nonlinearity: Arc::new(|_, _, a| a),
            terminal: Arc::new(|_| 0.0),
            lipschitz: vec![0.0; 4],
            eval_point: vec![0.0],
            cost: CostExponents { alpha: 0.0, gamma: 1.0, p: 1.0 },
            exp_euler: None,
            grid,
        };
        let theta = MultiIndex::new(vec![0, 1, 3]).unwrap();
        let (same, l0) = simulate_x(&spec, 1, &theta, 3, 3, &[2.0]).unwrap();
        assert_eq!(same, vec![2.0]);
        assert_eq!(l0.draws(), 0);

        let (x1, ledger) = simulate_x(&spec, 1, &theta, 3, 1, &[2.0]).unwrap();
        assert_eq!(ledger.normals, 2);
        let mut s = derive_stream(&StreamKey::new(1, theta.clone(), Channel::Brownian));
        let w: Vec<f64> = (0..3).map(|_| 0.5 * s.sample_standard_normal()).collect();
        assert!((x1[0] - (2.0 + w[2] + w[1])).abs() < 1e-15);

        assert!(simulate_x(&spec, 1, &theta, 2, 3, &[0.0]).is_err());
    }

    #[test]
    fn simulate_x_aggregates_to_horizon_variance() {
        let spec = make_registry_problem(2, 5, 2.0, NonlinearityKind::Zero, TerminalKind::Quadratic).unwrap();
        let runs = 100_000;
        let mut s = [[0.0; 2]; 2];
        for r in 0..runs {
            let (x, _) = simulate_x(&spec, 3, &MultiIndex::from(r as i64), 5, 0, &[1.0, -1.0]).unwrap();
            let c = [x[0] - 1.0, x[1] + 1.0];
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += c[i] * c[j];
                }
            }
        }
        // Var of a sample variance of N(0, T) is 2T²/n; covariance T²/n
        let n = runs as f64;
        for i in 0..2 {
            for j in 0..2 {
                let est = s[i][j] / n;
                let (target, sd) = if i == j { (2.0, (2.0 * 4.0 / n).sqrt()) } else { (0.0, (4.0 / n).sqrt()) };
                assert!((est - target).abs() < 4.0 * sd, "cov[{i}][{j}] = {est}");
            }
        }
    }

    #[test]
    fn width_does_not_change_bits() {
        let spec = make_registry_problem(2, 6, 1.0, NonlinearityKind::Sin { scale: 0.5 }, TerminalKind::GaussianBump).unwrap();
        let ee = spec.exp_euler.as_ref().unwrap();
        let dist = IndexDistribution::from_grid(&spec.grid);
        let base = MlpParams::new(3, 3, 77);
        let a = mlp_exp_euler(ee, &MultiIndex::root(), 6, &[0.0; 2], &base).unwrap();
        let g = mlp_general(&spec, &dist, &MultiIndex::root(), 6, &[0.0; 2], &base).unwrap();
        for w in [2, 3, 8] {
            let b = mlp_exp_euler(ee, &MultiIndex::root(), 6, &[0.0; 2], &base.with_width(w)).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert_eq!(a.ledger.normals, b.ledger.normals);
            let h = mlp_general(&spec, &dist, &MultiIndex::root(), 6, &[0.0; 2], &base.with_width(w)).unwrap();
            assert_eq!(g.value.to_bits(), h.value.to_bits());
        }
    }

    #[test]
    fn bad_arguments() {
        let spec = affine_problem();
        let ee = spec.exp_euler.as_ref().unwrap();
        assert!(mlp_exp_euler(ee, &MultiIndex::root(), 11, &[0.0], &MlpParams::new(2, 2, 0)).is_err());
        assert!(mlp_exp_euler(ee, &MultiIndex::root(), 1, &[0.0], &MlpParams::new(0, 2, 0)).is_err());
        assert!(mlp_exp_euler(ee, &MultiIndex::root(), 1, &[0.0, 0.0], &MlpParams::new(2, 2, 0)).is_err());
    }
}
