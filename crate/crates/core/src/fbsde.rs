//! Each population's optimal-control problem under a fixed price environment:
//! the adjoint as a conditional expectation, the optimal rate, the forward state.

use crate::condexp::{bucket_means, fit_buckets, Fit, MIN_BUCKET};
use crate::error::{Error, Result};
use crate::model::{AgentSpec, CostMode, Env, ModelBounds};
use crate::noise_tree::{Buckets, TransitionKernel};
use crate::paths::ScenarioBatch;

/// `-(y + price) / Λ`
pub fn optimal_control(y: f64, price: f64, lambda: f64) -> f64 {
    -(y + price) / lambda
}

/// Price seen by every sample on the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePaths {
    pub points: usize,
    /// Right-continuous value at each fine point.
    pub cadlag: Vec<f64>,
    /// Left limit at each fine point (differs only at interval endpoints).
    pub left: Vec<f64>,
}

impl PricePaths {
    pub fn constant(count: usize, points: usize, value: f64) -> Self {
        PricePaths { points, cadlag: vec![value; count * points], left: vec![value; count * points] }
    }

    pub fn row(&self, s: usize) -> (&[f64], &[f64]) {
        let r = s * self.points..(s + 1) * self.points;
        (&self.cadlag[r.clone()], &self.left[r])
    }
}

/// What the agent's adjoint is conditioned on, beyond the tree key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Information {
    /// Tree key only.
    Key,
    /// Tree key refined by a regression on `(B_t, C_t)`.
    KeyCommonFactor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub min_bucket: usize,
    pub picard_max: usize,
    pub picard_tol: f64,
    pub picard_damping: f64,
    pub degree: usize,
    /// Conditioning of informed agents with affine costs.
    pub informed_info: Information,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            min_bucket: MIN_BUCKET,
            picard_max: 200,
            picard_tol: 1e-7,
            picard_damping: 0.5,
            degree: 2,
            informed_info: Information::KeyCommonFactor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    AffineDirect,
    ConvexPicard,
}

/// Regression fits of the adjoint, per fine time and per bucket of that time's interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    pub fits: Vec<Vec<Fit>>,
    /// Pooled fit per time for keys never seen in the batch.
    pub pooled: Vec<Fit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution {
    pub points: usize,
    /// First fine index solved (0 unless the problem was started later).
    pub start: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub alpha: Vec<f64>,
    /// The integrand whose conditional expectation is `y`.
    pub bracket: Vec<f64>,
    pub mode: SolveMode,
    pub picard_iters: usize,
    pub residual: f64,
    pub update_trace: Vec<f64>,
    pub field: DecouplingField,
    pub pooled_keys: usize,
    pub reduced_fits: usize,
}

impl FbsdeSolution {
    pub fn y_at(&self, s: usize, k: usize) -> f64 {
        self.y[s * self.points + k]
    }

    pub fn sup_y(&self) -> f64 {
        self.y.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

pub(crate) fn env_at(agent: &AgentSpec, batch: &ScenarioBatch, s: usize, k: usize, price: f64) -> Env {
    Env {
        t: batch.fine_grid[k],
        price,
        common: batch.b_path(s)[k],
        factor: if agent.population.is_informed() { batch.c_path(s)[k] } else { 0.0 },
    }
}

/// Euler scheme for the state driven by `alpha`, from `xi` (or `x0` at `start`).
pub fn euler_states(
    batch: &ScenarioBatch,
    agent: &AgentSpec,
    price: &PricePaths,
    alpha: &[f64],
    start: Option<(usize, f64)>,
) -> Vec<f64> {
    let p = batch.points();
    let dt = batch.spec.dt();
    let informed = agent.population.is_informed();
    let (k0, x0) = start.unwrap_or((0, f64::NAN));
    let mut x = vec![0.0; batch.count * p];
    for s in 0..batch.count {
        let (cad, _) = price.row(s);
        let b = batch.b_path(s);
        let w = batch.w_path(informed, s);
        let row = &mut x[s * p..(s + 1) * p];
        row[k0] = if start.is_some() { x0 } else { batch.xi(informed, s) };
        for k in k0..p - 1 {
            let e = env_at(agent, batch, s, k, cad[k]);
            let drift = alpha[s * p + k] + agent.drift.eval(&e);
            row[k + 1] = row[k]
                + drift * dt
                + agent.vol_common.eval(&e) * (b[k + 1] - b[k])
                + agent.vol_idio.eval(&e) * (w[k + 1] - w[k]);
        }
    }
    x
}

/// Terminal value plus trapezoid integral of the running term, for every fine time.
fn brackets(batch: &ScenarioBatch, agent: &AgentSpec, price: &PricePaths, x: Option<&[f64]>, k0: usize) -> Vec<f64> {
    let p = batch.points();
    let dt = batch.spec.dt();
    let mut out = vec![0.0; batch.count * p];
    for s in 0..batch.count {
        let (cad, left) = price.row(s);
        let xs = |k: usize| x.map_or(0.0, |x| x[s * p + k]);
        let row = &mut out[s * p..(s + 1) * p];
        let last = p - 1;
        let mut acc = agent.terminal_dx(xs(last), &env_at(agent, batch, s, last, cad[last]));
        row[last] = acc;
        for k in (k0..last).rev() {
            let f_left = agent.running_dx(xs(k), &env_at(agent, batch, s, k, cad[k]));
            let f_right = agent.running_dx(xs(k + 1), &env_at(agent, batch, s, k + 1, left[k + 1]));
            acc += 0.5 * dt * (f_left + f_right);
            row[k] = acc;
        }
    }
    out
}

fn column(data: &[f64], points: usize, k: usize, count: usize) -> Vec<f64> {
    (0..count).map(|s| data[s * points + k]).collect()
}

fn controls(agent: &AgentSpec, price: &PricePaths, y: &[f64]) -> Vec<f64> {
    y.iter().zip(&price.cadlag).map(|(&y, &p)| optimal_control(y, p, agent.lambda)).collect()
}

struct Estimate {
    y: Vec<f64>,
    fits: Vec<Vec<Fit>>,
    pooled: Vec<Fit>,
    pooled_keys: usize,
    reduced: usize,
}

/// Conditional expectation of `bracket` at every fine time from `k0` on.
#[allow(clippy::too_many_arguments)]
fn estimate(
    batch: &ScenarioBatch,
    buckets: &Buckets,
    kernel: &TransitionKernel,
    bracket: &[f64],
    x: Option<&[f64]>,
    regress_factor: bool,
    regress: bool,
    opts: &SolverOptions,
    k0: usize,
) -> Estimate {
    let p = batch.points();
    let n = batch.count;
    let mut y = vec![0.0; n * p];
    let mut fits = vec![Vec::new(); p];
    let mut pooled = vec![Fit::constant(0.0, 0.0); p];
    let (mut pooled_keys, mut reduced) = (0, 0);
    for k in k0..p {
        let (i, _) = batch.spec.locate(k);
        let resp = column(bracket, p, k, n);
        let mut feats: Vec<Vec<f64>> = Vec::new();
        if regress {
            if let Some(x) = x {
                feats.push(column(x, p, k, n));
            }
            feats.push((0..n).map(|s| batch.b_path(s)[k]).collect());
            if regress_factor {
                feats.push((0..n).map(|s| batch.c_path(s)[k]).collect());
            }
        }
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let ib = &buckets.intervals[i];
        let at_k = if refs.is_empty() {
            bucket_means(ib, buckets.mode, kernel, &resp, opts.min_bucket)
                .into_iter()
                .map(|st| {
                    let mut f = Fit::constant(st.mean, st.se);
                    f.pooled = st.pooled;
                    f
                })
                .collect()
        } else {
            fit_buckets(buckets, i, kernel, &resp, &refs, opts.degree, opts.min_bucket)
        };
        let all: Vec<usize> = (0..n).collect();
        pooled[k] = if refs.is_empty() {
            crate::condexp::fit_bucket(&all, &resp, &[], opts.degree)
        } else {
            crate::condexp::fit_bucket(&all, &resp, &refs, opts.degree)
        };
        let mut point = vec![0.0; refs.len()];
        for s in 0..n {
            let fit = &at_k[ib.of_sample[s]];
            for (j, f) in refs.iter().enumerate() {
                point[j] = f[s];
            }
            y[s * p + k] = fit.predict(&point);
        }
        pooled_keys += at_k.iter().filter(|f| f.pooled).count();
        reduced += at_k.iter().filter(|f| f.reduced).count();
        fits[k] = at_k;
    }
    Estimate { y, fits, pooled, pooled_keys, reduced }
}

fn check_shapes(batch: &ScenarioBatch, buckets: &Buckets, price: &PricePaths) -> Result<()> {
    if buckets.sample_count() != batch.count || price.cadlag.len() != batch.count * batch.points() {
        return Err(Error::Shape("batch, buckets and price paths disagree on sample count".into()));
    }
    if buckets.spec != batch.spec {
        return Err(Error::Shape("buckets were built for a different grid".into()));
    }
    Ok(())
}

/// Affine costs: the adjoint is a conditional expectation of the environment alone.
pub fn solve_affine(
    batch: &ScenarioBatch,
    price: &PricePaths,
    agent: &AgentSpec,
    buckets: &Buckets,
    kernel: &TransitionKernel,
    opts: &SolverOptions,
) -> Result<FbsdeSolution> {
    if agent.cost_mode() != CostMode::Affine {
        return Err(Error::Mode(format!("{} agent does not have affine costs", agent.population.name())));
    }
    check_shapes(batch, buckets, price)?;
    let p = batch.points();
    let bracket = brackets(batch, agent, price, None, 0);
    let informed_regression = agent.population.is_informed() && opts.informed_info == Information::KeyCommonFactor;
    let est = estimate(batch, buckets, kernel, &bracket, None, true, informed_regression, opts, 0);
    let alpha = controls(agent, price, &est.y);
    let x = euler_states(batch, agent, price, &alpha, None);
    Ok(FbsdeSolution {
        points: p,
        start: 0,
        x,
        y: est.y,
        alpha,
        bracket,
        mode: SolveMode::AffineDirect,
        picard_iters: 0,
        residual: 0.0,
        update_trace: Vec::new(),
        field: DecouplingField { fits: est.fits, pooled: est.pooled },
        pooled_keys: est.pooled_keys,
        reduced_fits: est.reduced,
    })
}

/// General convex costs: damped Picard between the forward state and a
/// regression estimate of the adjoint on `(X_t, B_t[, C_t])` within tree keys.
#[allow(clippy::too_many_arguments)]
pub fn solve_convex(
    batch: &ScenarioBatch,
    price: &PricePaths,
    agent: &AgentSpec,
    buckets: &Buckets,
    kernel: &TransitionKernel,
    opts: &SolverOptions,
    start: Option<(usize, f64)>,
) -> Result<FbsdeSolution> {
    if agent.cost_mode() != CostMode::GeneralConvex {
        return Err(Error::Mode(format!("{} agent does not have general convex costs", agent.population.name())));
    }
    check_shapes(batch, buckets, price)?;
    let p = batch.points();
    let k0 = start.map_or(0, |(k, _)| k);
    if k0 >= p {
        return Err(Error::Input(format!("start index {k0} is past the horizon")));
    }
    let informed = agent.population.is_informed();
    let mut y = vec![0.0; batch.count * p];
    let mut trace = Vec::new();
    for iter in 1..=opts.picard_max {
        let alpha = controls(agent, price, &y);
        let x = euler_states(batch, agent, price, &alpha, start);
        let bracket = brackets(batch, agent, price, Some(&x), k0);
        let est = estimate(batch, buckets, kernel, &bracket, Some(&x), informed, true, opts, k0);
        let mut change: f64 = 0.0;
        for s in 0..batch.count {
            for k in k0..p {
                let idx = s * p + k;
                let next = (1.0 - opts.picard_damping) * y[idx] + opts.picard_damping * est.y[idx];
                change = change.max((next - y[idx]).abs());
                y[idx] = next;
            }
        }
        trace.push(change);
        if change <= opts.picard_tol {
            let alpha = controls(agent, price, &y);
            let x = euler_states(batch, agent, price, &alpha, start);
            return Ok(FbsdeSolution {
                points: p,
                start: k0,
                x,
                y,
                alpha,
                bracket,
                mode: SolveMode::ConvexPicard,
                picard_iters: iter,
                residual: change,
                update_trace: trace,
                field: DecouplingField { fits: est.fits, pooled: est.pooled },
                pooled_keys: est.pooled_keys,
                reduced_fits: est.reduced,
            });
        }
    }
    Err(Error::PicardStalled { iterations: opts.picard_max, last: *trace.last().unwrap_or(&f64::NAN), trace })
}

pub fn solve(
    batch: &ScenarioBatch,
    price: &PricePaths,
    agent: &AgentSpec,
    buckets: &Buckets,
    kernel: &TransitionKernel,
    opts: &SolverOptions,
) -> Result<FbsdeSolution> {
    match agent.cost_mode() {
        CostMode::Affine => solve_affine(batch, price, agent, buckets, kernel, opts),
        CostMode::GeneralConvex => solve_convex(batch, price, agent, buckets, kernel, opts, None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub se: f64,
    pub per_sample: Vec<f64>,
}

/// Monte Carlo and trapezoid estimate of the expected cost of `control`.
pub fn cost_functional(
    batch: &ScenarioBatch,
    price: &PricePaths,
    agent: &AgentSpec,
    control: &[f64],
) -> Result<CostEstimate> {
    let p = batch.points();
    if control.len() != batch.count * p || price.cadlag.len() != batch.count * p {
        return Err(Error::Shape(format!(
            "control has {} entries, batch needs {}",
            control.len(),
            batch.count * p
        )));
    }
    let dt = batch.spec.dt();
    let x = euler_states(batch, agent, price, control, None);
    let lambda = agent.lambda;
    let per_sample: Vec<f64> = (0..batch.count)
        .map(|s| {
            let (cad, left) = price.row(s);
            let a = &control[s * p..(s + 1) * p];
            let xs = &x[s * p..(s + 1) * p];
            let f = |k: usize, pr: f64| {
                pr * a[k] + 0.5 * lambda * a[k] * a[k] + agent.running_value(xs[k], &env_at(agent, batch, s, k, pr))
            };
            let mut total = 0.0;
            for k in 0..p - 1 {
                total += 0.5 * dt * (f(k, cad[k]) + f(k + 1, left[k + 1]));
            }
            total + agent.terminal_value(xs[p - 1], &env_at(agent, batch, s, p - 1, cad[p - 1]))
        })
        .collect();
    let n = batch.count as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = if batch.count > 1 {
        per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(CostEstimate { mean, se: (var / n).sqrt(), per_sample })
}

/// Lipschitz constant of the decoupling field from the model constants:
/// `Γ = √c / (√(1+c) − √c)` with `c = max(1,T)·C(T,L)·max(1, 1/(2Λ))`.
pub fn gamma_bound(horizon: f64, l: f64, lambda: f64) -> f64 {
    let t = horizon;
    let et = t.exp();
    let c_tl = (l * l * (10.0 * t * t + 2.0 * t + 10.0 + 2.0 * et)).max(14.0).max(10.0 * t + 2.0 * et);
    let c = t.max(1.0) * c_tl * (1.0 / (2.0 * lambda)).max(1.0);
    c.sqrt() / ((1.0 + c).sqrt() - c.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub ratio: f64,
    pub gamma: f64,
}

impl ProbeResult {
    pub fn within_bound(&self) -> bool {
        self.ratio <= self.gamma
    }
}

/// Restarts the problem at fine index `k` from two initial states on the same
/// noise and compares the adjoints at `k`.
#[allow(clippy::too_many_arguments)]
pub fn decoupling_probe(
    agent: &AgentSpec,
    bounds: &ModelBounds,
    price: &PricePaths,
    batch: &ScenarioBatch,
    buckets: &Buckets,
    kernel: &TransitionKernel,
    opts: &SolverOptions,
    k: usize,
    x1: f64,
    x2: f64,
) -> Result<ProbeResult> {
    if x1 == x2 {
        return Err(Error::Input("probe states must differ".into()));
    }
    let gamma = gamma_bound(bounds.horizon, bounds.l, agent.lambda);
    if agent.cost_mode() == CostMode::Affine {
        return Ok(ProbeResult { ratio: 0.0, gamma });
    }
    let a = solve_convex(batch, price, agent, buckets, kernel, opts, Some((k, x1)))?;
    let b = solve_convex(batch, price, agent, buckets, kernel, opts, Some((k, x2)))?;
    let ratio = (0..batch.count)
        .map(|s| (a.y_at(s, k) - b.y_at(s, k)).abs() / (x1 - x2).abs())
        .fold(0.0, f64::max);
    Ok(ProbeResult { ratio, gamma })
}
