//! Error and cost bounds, level selection, and the RMSE / complexity
//! experiments built on them.

use rayon::prelude::*;

use crate::error::{DomainError, MlpError};
use crate::mlp_engine::{cost_predict, estimate_at_horizon, MlpParams};
use crate::model::{ExpEuler, IndexDistribution, ProblemSpec};
use crate::oracles::OracleResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub m: u64,
    pub n: u32,
    pub steps: usize,
    /// `Σ_l L_l`
    pub lipschitz_sum: f64,
    /// `c` with `L_l ≤ c·P_k(l)`, when known.
    pub coupling_c: Option<f64>,
    /// `max_{k>l} L_l/𝔭_{k,l}`
    pub max_ratio: f64,
    /// `‖g(X_0)‖₂ + Σ_l ‖f_l(X_l, 0)‖₂`
    pub kappa: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.m == 0 {
            return Err(DomainError::new("M must be at least 1"));
        }
        let nonneg = [self.lipschitz_sum, self.max_ratio, self.kappa, self.coupling_c.unwrap_or(0.0)];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(DomainError::new("bound inputs must be nonnegative"));
        }
        if let Some(c) = self.coupling_c {
            if self.max_ratio > c * (1.0 + 1e-12) {
                return Err(DomainError::new(format!("max ratio {} exceeds coupling constant {c}", self.max_ratio)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityInputs {
    pub gamma: f64,
    pub alpha: f64,
    pub p: f64,
    pub d: usize,
    pub steps: usize,
    pub m: u64,
    pub n: u32,
}

/// `exp(M/2 + Σ L)·M^{−N/2}·(1 + 2·max_ratio)^N·κ`, evaluated in log space.
pub fn error_bound_general(b: &BoundInputs) -> f64 {
    if b.kappa == 0.0 {
        return 0.0;
    }
    let m = b.m as f64;
    let n = b.n as f64;
    (m / 2.0 + b.lipschitz_sum - n / 2.0 * m.ln() + n * (2.0 * b.max_ratio).ln_1p() + b.kappa.ln()).exp()
}

/// `κ(1 + 2c)^N M^{−N/2} exp(M/2 + c)`.
pub fn theorem_bound(c: f64, kappa: f64, m: u64, n: u32) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let mf = m as f64;
    let nf = n as f64;
    (nf * (2.0 * c).ln_1p() - nf / 2.0 * mf.ln() + mf / 2.0 + c + kappa.ln()).exp()
}

/// How the nonlinearity enters each exponential-Euler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `Δt·f(·)`, the scheme implemented by [`crate::mlp_exp_euler`].
    TimeWeighted,
    /// `f(·)` with no step factor.
    Unweighted,
}

/// Exponential-Euler error bound.
///
/// * `TimeWeighted`: `exp(L_f T + M/2)(1 + 2L_f T)^N M^{−N/2}·[κ_v0 + T|f(0)|]`.
/// * `Unweighted`: `exp(KL_f + M/2)(1 + 2KL_f)^N M^{−N/2}·[κ_v0 + K|f(0)|]`.
///
/// `kappa_v0` is `(E|v_0(ξ + W_T)|²)^{1/2}`.
#[allow(clippy::too_many_arguments)]
pub fn error_bound_exp_euler(
    m: u64,
    n: u32,
    steps: usize,
    lipschitz_f: f64,
    horizon: f64,
    kappa_v0: f64,
    f_at_zero_abs: f64,
    weighting: Weighting,
) -> f64 {
    let (c, scale) = match weighting {
        Weighting::TimeWeighted => (lipschitz_f * horizon, horizon),
        Weighting::Unweighted => (steps as f64 * lipschitz_f, steps as f64),
    };
    theorem_bound(c, kappa_v0 + scale * f_at_zero_abs, m, n)
}

/// `[(1 + 3γ)/2]·d^p·K^α·(3M)^n`.
pub fn cost_bound(ci: &ComplexityInputs) -> f64 {
    (1.0 + 3.0 * ci.gamma) / 2.0
        * (ci.d as f64).powf(ci.p)
        * (ci.steps as f64).powf(ci.alpha)
        * (3.0 * ci.m as f64).powi(ci.n as i32)
}

/// `κ e^c (√e (1+2c))^N N^{−N/2}`, the bound at `M = N`.
pub fn level_certificate(n: u32, c: f64, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    (kappa.ln() + c + nf * (0.5 + (2.0 * c).ln_1p()) - nf / 2.0 * nf.ln()).exp()
}

/// Smallest `N ≥ 1` whose certificate is at most `ε`.
pub fn select_levels(epsilon: f64, c: f64, kappa: f64) -> Result<u32, DomainError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(DomainError::new(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    if !(c >= 0.0) || !(kappa >= 0.0) || !c.is_finite() || !kappa.is_finite() {
        return Err(DomainError::new("c and kappa must be finite and nonnegative"));
    }
    // N^{−N/2} eventually beats any geometric factor, so this terminates
    let mut n = 1u32;
    while level_certificate(n, c, kappa) > epsilon {
        n += 1;
    }
    Ok(n)
}

/// `(E|v_0(ξ + W_T)|²)^{1/2}` for registry terminals.
pub fn kappa_v0(ee: &ExpEuler, xi: &[f64]) -> Option<f64> {
    ee.v0_kind.map(|k| k.l2_norm_under_gaussian(xi, ee.horizon()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub m: u64,
    pub n: u32,
    pub runs: usize,
    pub mean: f64,
    pub rmse: f64,
    /// Jackknife standard error of `rmse`.
    pub stderr: f64,
    pub bound: f64,
    pub normals_mean: f64,
    /// `false` when the reference radius exceeds a tenth of the RMSE.
    pub reference_ok: bool,
}

/// `(rmse, jackknife stderr)` of `values` against `reference`.
pub fn rmse_with_jackknife(values: &[f64], reference: f64) -> (f64, f64) {
    let n = values.len();
    let sq: Vec<f64> = values.iter().map(|v| (v - reference).powi(2)).collect();
    let total: f64 = sq.iter().sum();
    let rmse = (total / n as f64).sqrt();
    if n < 2 {
        return (rmse, 0.0);
    }
    let loo: Vec<f64> = sq.iter().map(|s| ((total - s).max(0.0) / (n - 1) as f64).sqrt()).collect();
    let mean_loo = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|r| (r - mean_loo).powi(2)).sum::<f64>() * (n - 1) as f64 / n as f64;
    (rmse, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct RmseSetup {
    /// `(M, N)` cells.
    pub cells: Vec<(u64, u32)>,
    pub runs: usize,
    pub seed: u64,
    pub width: usize,
    /// For exponential-Euler problems `κ_v0`; otherwise the full `κ`.
    pub kappa: f64,
    pub max_total_samples: u64,
}

fn bound_for(spec: &ProblemSpec, kappa: f64, m: u64, n: u32) -> f64 {
    match &spec.exp_euler {
        Some(ee) => error_bound_exp_euler(
            m,
            n,
            ee.steps(),
            ee.lipschitz_f,
            ee.horizon(),
            kappa,
            (ee.f)(0.0).abs(),
            Weighting::TimeWeighted,
        ),
        None => {
            let dist = IndexDistribution::from_grid(&spec.grid);
            error_bound_general(&BoundInputs {
                m,
                n,
                steps: spec.steps(),
                lipschitz_sum: spec.lipschitz_sum(),
                coupling_c: None,
                max_ratio: dist.max_ratio(&spec.lipschitz),
                kappa,
            })
        }
    }
}

/// Runs `runs` replicas with seeds `seed+1, …, seed+runs` per cell (the same
/// seeds in every cell) and compares them with `reference`.
pub fn rmse_experiment(spec: &ProblemSpec, setup: &RmseSetup, reference: &OracleResult) -> Result<Vec<RmseReport>, MlpError> {
    if setup.runs == 0 {
        return Err(DomainError::new("need at least one run").into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.width.max(1))
        .build()
        .map_err(|e| DomainError::new(format!("cannot start worker pool: {e}")))?;
    let mut out = Vec::with_capacity(setup.cells.len());
    for &(m, n) in &setup.cells {
        let seeds: Vec<u64> = (1..=setup.runs as u64).map(|i| setup.seed.wrapping_add(i)).collect();
        let results: Vec<Result<(f64, u64), MlpError>> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| {
                    let params = MlpParams::new(m, n, s).with_cap(setup.max_total_samples);
                    estimate_at_horizon(spec, &params).map(|e| (e.value, e.ledger.normals))
                })
                .collect()
        });
        let mut values = Vec::with_capacity(setup.runs);
        let mut normals = 0.0;
        for r in results {
            let (v, nn) = r?;
            values.push(v);
            normals += nn as f64;
        }
        let (rmse, stderr) = rmse_with_jackknife(&values, reference.value);
        out.push(RmseReport {
            m,
            n,
            runs: setup.runs,
            mean: values.iter().sum::<f64>() / setup.runs as f64,
            rmse,
            stderr,
            bound: bound_for(spec, setup.kappa, m, n),
            normals_mean: normals / setup.runs as f64,
            reference_ok: reference.error_radius <= rmse / 10.0 || reference.error_radius == 0.0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub d: usize,
    pub eps: f64,
    pub n_selected: u32,
    /// Normals plus uniforms of one estimate at `M = N`.
    pub cost_predicted: u128,
    pub cost_bound: f64,
    /// `cost·ε^{2+δ}/(d^p K^α)`
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityTable {
    pub rows: Vec<ComplexityRow>,
    pub delta: f64,
}

impl ComplexityTable {
    pub fn max_normalized(&self) -> f64 {
        self.rows.iter().map(|r| r.normalized).fold(0.0, f64::max)
    }

    pub fn median_normalized(&self) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.normalized).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return 0.0;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// At every fixed `ε`, `normalized` does not increase with `d` beyond
    /// relative rounding `tol`.
    pub fn nonincreasing_in_d(&self, tol: f64) -> bool {
        let mut rows: Vec<&ComplexityRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.eps.total_cmp(&b.eps).then(a.d.cmp(&b.d)));
        rows.windows(2).all(|w| w[0].eps != w[1].eps || w[1].normalized <= w[0].normalized * (1.0 + tol))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexitySetup {
    pub dims: Vec<usize>,
    pub eps: Vec<f64>,
    pub delta: f64,
    pub c: f64,
    pub kappa: f64,
    pub steps: usize,
}

/// Cost of the exponential-Euler estimator at the level count certified for
/// each `ε`, normalised by `ε^{−(2+δ)}·d^p·K^α` with `(γ, α, p) = (1, 0, 1)`.
pub fn complexity_experiment(setup: &ComplexitySetup) -> Result<ComplexityTable, MlpError> {
    if !(setup.delta > 0.0) {
        return Err(DomainError::new(format!("delta must be positive, got {}", setup.delta)).into());
    }
    let (gamma, alpha, p) = (1.0, 0.0, 1.0);
    let mut rows = Vec::new();
    for &eps in &setup.eps {
        let n = select_levels(eps, setup.c, setup.kappa)?;
        for &d in &setup.dims {
            let cost = cost_predict(d, n as u64, n)?.total();
            let bound = cost_bound(&ComplexityInputs { gamma, alpha, p, d, steps: setup.steps, m: n as u64, n });
            let normalized = cost as f64 * eps.powf(2.0 + setup.delta) / ((d as f64).powf(p) * (setup.steps as f64).powf(alpha));
            rows.push(ComplexityRow { d, eps, n_selected: n, cost_predicted: cost, cost_bound: bound, normalized });
        }
    }
    Ok(ComplexityTable { rows, delta: setup.delta })
}
