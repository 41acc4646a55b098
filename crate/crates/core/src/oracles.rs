//! Reference values of `v_k` that do not go through the MLP estimator:
//! a closed form for affine nonlinearities, Gauss–Hermite quadrature in one
//! dimension, and brute-force nested Monte Carlo.

use rayon::prelude::*;

use crate::error::{DomainError, MlpError};
use crate::model::ProblemSpec;
use crate::rand_streams::{derive_stream, Channel, CostLedger, MultiIndex, Stream, StreamKey};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489004;

/// `P(|Z| > 6)`, the Gaussian mass beyond the quadrature half-width.
const TAIL_MASS: f64 = 1.973_175_290_075_e-9;

/// Deepest nesting [`nested_mc`] accepts.
pub const NESTED_MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    ClosedForm,
    Quadrature,
    NestedMc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub method: OracleMethod,
    /// 0 for closed forms, a discretisation estimate for quadrature, a 99%
    /// half-width for nested Monte Carlo.
    pub error_radius: f64,
    /// Draws consumed; empty for deterministic methods.
    pub ledger: CostLedger,
}

impl OracleResult {
    /// `|a − b| ≤ r_a + r_b`, plus a rounding allowance.
    pub fn agrees_with(&self, other: &OracleResult) -> bool {
        let floor = 1e-12 * (1.0 + self.value.abs().max(other.value.abs()));
        (self.value - other.value).abs() <= self.error_radius + other.error_radius + floor
    }
}

/// `v_K` of the exponential-Euler scheme on the uniform grid with
/// `f(a) = αa + β` and `v_0 ≡ c0`.
///
/// The recursion is `v_k = ρ v_{k−1} + βT/K` with `ρ = 1 + αT/K`. Because it
/// is linear, the same value is `v_K(ξ)` for any `v_0` whose Gaussian mean
/// `E v_0(ξ + W_T)` equals `c0`.
pub fn exact_affine(steps: usize, horizon: f64, alpha: f64, beta: f64, c0: f64) -> Result<OracleResult, DomainError> {
    if steps == 0 {
        return Err(DomainError::new("step count K must be positive"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(DomainError::new(format!("horizon T must be positive, got {horizon}")));
    }
    let k = steps as f64;
    let dt = horizon / k;
    let rho = 1.0 + alpha * dt;
    let value = if rho == 1.0 {
        c0 + k * beta * dt
    } else {
        let rk = rho.powi(steps as i32);
        rk * c0 + beta * dt * (rk - 1.0) / (rho - 1.0)
    };
    Ok(OracleResult { value, method: OracleMethod::ClosedForm, error_radius: 0.0, ledger: CostLedger::default() })
}

/// Nodes and weights with `Σ w_i h(z_i) ≈ E h(Z)`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// `q`-point rule, exact for polynomials of degree `< 2q`.
    pub fn new(q: usize) -> Result<Self, DomainError> {
        if q == 0 {
            return Err(DomainError::new("need at least one Hermite node"));
        }
        // Newton iteration on orthonormal physicists' Hermite functions with
        // the classic asymptotic starting guesses, then rescaled.
        const PIM4: f64 = 0.751_125_544_464_942_5;
        let n = q;
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for iter in 0..200 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                    break;
                }
                if iter == 199 {
                    return Err(DomainError::new(format!("Hermite root {i} of {q} did not converge")));
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let nodes = x.iter().rev().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().rev().map(|v| v * inv_sqrt_pi).collect();
        Ok(GaussHermite { nodes, weights })
    }

    /// `E h(μ + σZ)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, mu: f64, sigma: f64, h: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * h(mu + sigma * z)).sum()
    }
}

/// Natural cubic spline through equally spaced samples; constant beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Spline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    pub fn new(x0: f64, h: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n >= 3 {
            // M_{i−1} + 4M_i + M_{i+1} = 6Δ²y_i/h², M_0 = M_{n−1} = 0
            let inner = n - 2;
            let mut c = vec![0.0; inner];
            let mut d = vec![0.0; inner];
            for i in 0..inner {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
                let denom = if i == 0 { 4.0 } else { 4.0 - c[i - 1] };
                c[i] = 1.0 / denom;
                d[i] = if i == 0 { rhs / denom } else { (rhs - d[i - 1]) / denom };
            }
            for i in (0..inner).rev() {
                m[i + 1] = if i + 1 == inner { d[i] } else { d[i] - c[i] * m[i + 2] };
            }
        }
        Spline { x0, h, y, m }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let hi = self.x0 + self.h * (n - 1) as f64;
        if x <= self.x0 {
            return self.y[0];
        }
        if x >= hi {
            return self.y[n - 1];
        }
        let s = (x - self.x0) / self.h;
        let i = (s.floor() as usize).min(n - 2);
        let t = s - i as f64;
        let u = 1.0 - t;
        u * self.y[i]
            + t * self.y[i + 1]
            + self.h * self.h / 6.0 * ((u * u * u - u) * self.m[i] + (t * t * t - t) * self.m[i + 1])
    }
}

/// Tables of `v_0, …, v_K` on a uniform grid around `ξ`.
pub struct QuadratureTables<'a> {
    spec: &'a ProblemSpec,
    rule: GaussHermite,
    xi: f64,
    /// `tables[k]` interpolates `v_k`; `tables[0]` is unused (`v_0 = g` is exact).
    tables: Vec<Spline>,
    /// Per-level value at `ξ` from the half-resolution run.
    coarse_at_xi: Vec<f64>,
}

fn check_quadrature_spec(spec: &ProblemSpec) -> Result<(), DomainError> {
    if spec.d != 1 {
        return Err(DomainError::new(format!("quadrature needs d = 1, got d = {}", spec.d)));
    }
    if spec.exp_euler.is_none() {
        return Err(DomainError::new("quadrature needs additive Brownian dynamics (exponential-Euler family)"));
    }
    Ok(())
}

fn tabulate(spec: &ProblemSpec, rule: &GaussHermite, xi: f64, half_width: f64, points: usize) -> Vec<Spline> {
    let h = 2.0 * half_width / (points - 1) as f64;
    let x0 = xi - half_width;
    let xs: Vec<f64> = (0..points).map(|i| x0 + h * i as f64).collect();
    let g = &spec.terminal;
    let f = &spec.nonlinearity;
    let mut tables = vec![Spline::new(x0, h, vec![0.0])];
    for k in 1..=spec.steps() {
        let sigma = spec.dynamics.step_variance[k - 1].sqrt();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                rule.expect(x, sigma, |y| {
                    let prev = if k == 1 { g(&[y]) } else { tables[k - 1].eval(y) };
                    f(k - 1, &[y], prev)
                })
            })
            .collect();
        tables.push(Spline::new(x0, h, ys));
    }
    tables
}

/// Tabulates `v_k` on `G` points over `[ξ − R, ξ + R]`, `R = 6√T`, taking each
/// step's expectation with a `Q`-node Gauss–Hermite rule over a cubic spline
/// of the previous level. The error radius compares against a run with
/// `(G+1)/2` points and `Q/2` nodes and adds the Gaussian tail mass beyond
/// `R` times the spread of the table.
pub fn quadrature_1d(spec: &ProblemSpec, grid_points: usize, hermite_nodes: usize) -> Result<QuadratureTables<'_>, DomainError> {
    check_quadrature_spec(spec)?;
    if grid_points < 5 || grid_points.is_multiple_of(2) {
        return Err(DomainError::new(format!("grid point count must be odd and ≥ 5, got {grid_points}")));
    }
    if hermite_nodes < 4 {
        return Err(DomainError::new(format!("need at least 4 Hermite nodes, got {hermite_nodes}")));
    }
    let xi = spec.eval_point[0];
    let half_width = 6.0 * spec.grid.horizon().sqrt();
    let rule = GaussHermite::new(hermite_nodes)?;
    let coarse_rule = GaussHermite::new(hermite_nodes / 2)?;
    let tables = tabulate(spec, &rule, xi, half_width, grid_points);
    let coarse = tabulate(spec, &coarse_rule, xi, half_width, grid_points.div_ceil(2));
    let coarse_at_xi = (0..=spec.steps()).map(|k| if k == 0 { (spec.terminal)(&[xi]) } else { coarse[k].eval(xi) }).collect();
    Ok(QuadratureTables { spec, rule, xi, tables, coarse_at_xi })
}

impl QuadratureTables<'_> {
    pub fn steps(&self) -> usize {
        self.tables.len() - 1
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// Interpolated `v_k(x)`.
    pub fn v(&self, k: usize, x: f64) -> f64 {
        if k == 0 {
            (self.spec.terminal)(&[x])
        } else {
            self.tables[k].eval(x)
        }
    }

    /// `v_k(ξ)` with its discretisation radius.
    pub fn result(&self, k: usize) -> OracleResult {
        let value = self.v(k, self.xi);
        // resolution term plus what clamping beyond ±R can cost
        let oscillation = if k == 0 { 0.0 } else { self.tables[k].y.iter().map(|y| (y - value).abs()).fold(0.0, f64::max) };
        let radius = (value - self.coarse_at_xi[k]).abs() + TAIL_MASS * oscillation + 1e-12 * (1.0 + value.abs());
        OracleResult { value, method: OracleMethod::Quadrature, error_radius: radius, ledger: CostLedger::default() }
    }

    /// `E h(X^{k,ξ}_l)` where `X^{k,ξ}_l = ξ + W_{t_k} − W_{t_l}`.
    fn expect_at<F: Fn(f64) -> f64>(&self, k: usize, l: usize, h: F) -> f64 {
        let var: f64 = self.spec.dynamics.step_variance[l..k].iter().sum();
        self.rule.expect(self.xi, var.sqrt(), h)
    }

    /// `|v_k(ξ) − E v_l(X_l) − Σ_{s=l}^{k−1} E[f_s(X_s, v_s(X_s)) − v_s(X_s)]|`
    /// with `X_s = X^{k,ξ}_s`.
    pub fn telescoping_check(&self, k: usize, l: usize) -> Result<f64, DomainError> {
        if l > k || k > self.steps() {
            return Err(DomainError::new(format!("need l ≤ k ≤ K, got l = {l}, k = {k}")));
        }
        let lhs = self.v(k, self.xi);
        let mut rhs = self.expect_at(k, l, |y| self.v(l, y));
        for s in l..k {
            rhs += self.expect_at(k, s, |y| {
                let v = self.v(s, y);
                (self.spec.nonlinearity)(s, &[y], v) - v
            });
        }
        Ok((lhs - rhs).abs())
    }

    /// Both sides of the a-priori moment bound:
    /// `max_k ‖v_k(X^{K,ξ}_k)‖₂` and
    /// `exp(Σ L_l)·[‖g(X^{K,ξ}_0)‖₂ + Σ_l ‖f_l(X^{K,ξ}_l, 0)‖₂]`.
    pub fn a_priori(&self) -> AprioriCheck {
        let big_k = self.steps();
        let l2 = |k: usize, h: &dyn Fn(f64) -> f64| self.expect_at(big_k, k, |y| h(y).powi(2)).sqrt();
        let lhs = (0..=big_k).map(|k| l2(k, &|y| self.v(k, y))).fold(0.0, f64::max);
        let mut bracket = l2(0, &|y| (self.spec.terminal)(&[y]));
        for l in 0..big_k {
            bracket += l2(l, &|y| (self.spec.nonlinearity)(l, &[y], 0.0));
        }
        AprioriCheck { lhs, rhs: self.spec.lipschitz_sum().exp() * bracket }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl AprioriCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + 1e-12)
    }
}

/// Normals drawn by a depth-`k` nested estimator.
pub fn nested_mc_cost(per_step_normals: usize, k: usize, m: u64) -> u128 {
    let m = m as u128;
    (1..=k as u32).map(|j| m.saturating_pow(j)).fold(0u128, |a, b| a.saturating_add(b)).saturating_mul(per_step_normals as u128)
}

struct Nested<'a> {
    spec: &'a ProblemSpec,
    seed: u64,
    m: u64,
}

impl Nested<'_> {
    /// Next state of child `i` of node `node`, whose noise sits at offset
    /// `i·normals_per_step` of the node's Brownian stream.
    fn child_state(&self, stream: &mut Stream, k: usize, x: &[f64], noise: &mut [f64], y: &mut [f64]) -> Result<(), DomainError> {
        stream.fill_gaussian(noise, self.spec.dynamics.step_variance[k - 1])?;
        (self.spec.dynamics.map)(k - 1, x, noise, y);
        Ok(())
    }

    /// `f_{k−1}(X_i, v̂_{k−1}(X_i))` for child `i`.
    fn child_term(&self, node: &MultiIndex, k: usize, y: &[f64], i: u64, ledger: &mut CostLedger) -> Result<f64, DomainError> {
        // leaves evaluate g directly and own no stream
        let inner = if k == 1 { (self.spec.terminal)(y) } else { self.value(&node.push(i as i64), k - 1, y, ledger)? };
        Ok((self.spec.nonlinearity)(k - 1, y, inner))
    }

    fn value(&self, node: &MultiIndex, k: usize, x: &[f64], ledger: &mut CostLedger) -> Result<f64, DomainError> {
        if k == 0 {
            return Ok((self.spec.terminal)(x));
        }
        let mut stream = derive_stream(&StreamKey::new(self.seed, node.clone(), Channel::Brownian));
        let mut noise = vec![0.0; self.spec.dynamics.normals_per_step];
        let mut y = vec![0.0; x.len()];
        let mut acc = 0.0;
        for i in 0..self.m {
            self.child_state(&mut stream, k, x, &mut noise, &mut y)?;
            acc += self.child_term(node, k, &y, i, ledger)?;
        }
        ledger.merge(&stream.ledger());
        Ok(acc / self.m as f64)
    }
}

/// Plug-in nested Monte Carlo estimate of `v_k(x)`: each level averages `m`
/// samples of `f_{k−1}(X, v̂_{k−1}(X))`, every branch with its own stream.
///
/// Streams hang off the multi-index `(−1)` so they never coincide with the
/// MLP estimator's. The radius is the 99% half-width from the outer sample
/// variance; inner estimation error is folded into that variance. The outer
/// loop runs on the global worker pool and is reduced in fixed order.
pub fn nested_mc(spec: &ProblemSpec, k: usize, x: &[f64], m: u64, seed: u64) -> Result<OracleResult, MlpError> {
    if k > NESTED_MAX_DEPTH {
        return Err(MlpError::Depth { k, max: NESTED_MAX_DEPTH, predicted: nested_mc_cost(spec.dynamics.normals_per_step, k, m) });
    }
    if m < 2 {
        return Err(DomainError::new(format!("nested Monte Carlo needs m ≥ 2, got {m}")).into());
    }
    if k > spec.steps() {
        return Err(DomainError::new(format!("k = {k} exceeds K = {}", spec.steps())).into());
    }
    if x.len() != spec.d {
        return Err(DomainError::new("evaluation point has wrong dimension").into());
    }
    if k == 0 {
        let value = (spec.terminal)(x);
        return Ok(OracleResult { value, method: OracleMethod::NestedMc, error_radius: 0.0, ledger: CostLedger::default() });
    }
    let start = std::time::Instant::now();
    let ctx = Nested { spec, seed, m };
    let root = MultiIndex::from(-1);
    let per_step = spec.dynamics.normals_per_step;
    let key = StreamKey::new(seed, root.clone(), Channel::Brownian);
    let outer: Vec<Result<(f64, CostLedger), DomainError>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut stream = derive_stream(&key);
            stream.seek(i * per_step as u64);
            let mut noise = vec![0.0; per_step];
            let mut y = vec![0.0; x.len()];
            ctx.child_state(&mut stream, k, x, &mut noise, &mut y)?;
            let mut ledger = stream.ledger();
            let v = ctx.child_term(&root, k, &y, i, &mut ledger)?;
            Ok((v, ledger))
        })
        .collect();
    let mut ys = Vec::with_capacity(m as usize);
    let mut ledger = CostLedger::default();
    for r in outer {
        let (v, l) = r?;
        ys.push(v);
        ledger.merge(&l);
    }
    let mf = m as f64;
    let mean = ys.iter().sum::<f64>() / mf;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (mf - 1.0);
    ledger.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(OracleResult { value: mean, method: OracleMethod::NestedMc, error_radius: Z99 * (var / mf).sqrt(), ledger })
}
