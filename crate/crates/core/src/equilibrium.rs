//! The tree price, the input-output map on it, the damped fixed-point iteration
//! and the diagnostics checked against the model bounds.

use std::collections::{BTreeMap, HashMap};

use crate::condexp::bucket_means;
use crate::error::{Error, Result};
use crate::fbsde::{solve, FbsdeSolution, PricePaths, SolverOptions};
use crate::io::fmt_real;
use crate::model::MarketSpec;
use crate::noise_tree::{bucket_indexed, transition_matrix, Buckets, GridSpec, KeyMode, TransitionKernel, TreeKey};
use crate::paths::ScenarioBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct PriceEntry {
    /// Values on the `m + 1` fine points of the interval.
    pub values: Vec<f64>,
    /// Samples behind the value; used to weight fallbacks for unseen keys.
    pub weight: usize,
}

/// Price as a function of the tree key, one vector of sub-time values per key.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePrice {
    pub spec: GridSpec,
    pub mode: KeyMode,
    /// Per interval, keyed by the key's lattice states.
    pub intervals: Vec<BTreeMap<Vec<u16>, PriceEntry>>,
}

impl DiscretePrice {
    /// A price on every key of `buckets`, filled by `f(interval, sub_index)`.
    pub fn from_fn(buckets: &Buckets, f: impl Fn(usize, usize) -> f64) -> Self {
        let m = buckets.spec.m;
        let intervals = buckets
            .intervals
            .iter()
            .enumerate()
            .map(|(i, ib)| {
                ib.keys
                    .iter()
                    .zip(&ib.members)
                    .map(|(k, mem)| {
                        (k.states.clone(), PriceEntry { values: (0..=m).map(|j| f(i, j)).collect(), weight: mem.len() })
                    })
                    .collect()
            })
            .collect();
        DiscretePrice { spec: buckets.spec, mode: buckets.mode, intervals }
    }

    pub fn zeros(buckets: &Buckets) -> Self {
        Self::from_fn(buckets, |_, _| 0.0)
    }

    pub fn get(&self, key: &TreeKey) -> Option<&[f64]> {
        if key.mode != self.mode {
            return None;
        }
        self.intervals.get(key.interval)?.get(&key.states).map(|e| e.values.as_slice())
    }

    pub fn key_count(&self) -> usize {
        self.intervals.iter().map(|m| m.len()).sum()
    }

    /// Value vector for a key, falling back for keys the price was never built on:
    /// first the sample-weighted mean over keys with the same current state, then
    /// over the whole interval.
    pub fn lookup(&self, key: &TreeKey) -> (Vec<f64>, bool) {
        if let Some(v) = self.get(key) {
            return (v.to_vec(), false);
        }
        let m = self.spec.m;
        let level = &self.intervals[key.interval];
        let average = |filter: &dyn Fn(&Vec<u16>) -> bool| -> Option<Vec<f64>> {
            let mut acc = vec![0.0; m + 1];
            let mut total = 0.0;
            for (_, e) in level.iter().filter(|(s, _)| filter(s)) {
                let w = e.weight.max(1) as f64;
                for (a, v) in acc.iter_mut().zip(&e.values) {
                    *a += w * v;
                }
                total += w;
            }
            (total > 0.0).then(|| acc.into_iter().map(|a| a / total).collect())
        };
        let current = key.current();
        let same = average(&|s: &Vec<u16>| s.last().copied() == current);
        (same.or_else(|| average(&|_| true)).unwrap_or_else(|| vec![0.0; m + 1]), true)
    }

    /// Price along every sample of the batch on the fine grid.
    pub fn paths(&self, batch: &ScenarioBatch) -> PricePaths {
        self.paths_for(&batch.spec, &batch.node_path, batch.count)
    }

    pub fn paths_for(&self, spec: &GridSpec, node_paths: &[Vec<u16>], count: usize) -> PricePaths {
        let p = spec.fine_steps() + 1;
        let m = spec.m;
        let mut cache: Vec<HashMap<TreeKey, Vec<f64>>> = vec![HashMap::new(); spec.intervals()];
        let mut cadlag = vec![0.0; count * p];
        let mut left = vec![0.0; count * p];
        for (s, path) in node_paths.iter().enumerate().take(count) {
            for i in 0..spec.intervals() {
                let key = TreeKey::new(self.mode, i, path);
                let vals = cache[i].entry(key.clone()).or_insert_with(|| self.lookup(&key).0);
                let base = s * p + i * m;
                for j in 0..=m {
                    if j < m || i + 1 == spec.intervals() {
                        cadlag[base + j] = vals[j];
                    }
                    left[base + j] = vals[j];
                }
            }
            left[s * p] = cadlag[s * p];
        }
        PricePaths { points: p, cadlag, left }
    }

    pub fn sup_abs(&self) -> f64 {
        self.intervals
            .iter()
            .flat_map(|m| m.values())
            .flat_map(|e| e.values.iter())
            .fold(0.0, |a, v| a.max(v.abs()))
    }

    fn same_shape(&self, other: &DiscretePrice) -> Result<()> {
        if self.spec != other.spec || self.mode != other.mode {
            return Err(Error::Shape("prices live on different grids or key modes".into()));
        }
        for (a, b) in self.intervals.iter().zip(&other.intervals) {
            if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
                return Err(Error::Shape("prices are defined on different key sets".into()));
            }
        }
        Ok(())
    }

    /// `(1 - rho) self + rho other`, on the same keys.
    pub fn blend(&self, other: &DiscretePrice, rho: f64) -> Result<DiscretePrice> {
        self.same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.intervals.iter_mut().zip(&other.intervals) {
            for (ea, eb) in a.values_mut().zip(b.values()) {
                for (x, y) in ea.values.iter_mut().zip(&eb.values) {
                    *x = if rho == 1.0 { *y } else { (1.0 - rho) * *x + rho * y };
                }
            }
        }
        Ok(out)
    }

    pub fn map_values(&self, f: impl Fn(usize, &[u16], usize, f64) -> f64) -> DiscretePrice {
        let mut out = self.clone();
        for (i, level) in out.intervals.iter_mut().enumerate() {
            for (states, e) in level.iter_mut() {
                for (j, v) in e.values.iter_mut().enumerate() {
                    *v = f(i, states, j, *v);
                }
            }
        }
        out
    }

    /// Rows `interval,key,sub_time,price` with a header.
    pub fn to_csv(&self) -> String {
        let lat = self.spec.lattice();
        let mut out = String::from("interval,key,sub_time,price\n");
        for (i, level) in self.intervals.iter().enumerate() {
            for (states, e) in level {
                let label = TreeKey { mode: self.mode, interval: i, states: states.clone() }.label(&lat);
                for (j, v) in e.values.iter().enumerate() {
                    let t = self.spec.fine_time(i * self.spec.m + j);
                    out.push_str(&format!("{i},{label},{},{}\n", fmt_real(t), fmt_real(*v)));
                }
            }
        }
        out
    }
}

/// Sup distance over intervals, keys and sub-times.
pub fn price_metric(a: &DiscretePrice, b: &DiscretePrice) -> Result<f64> {
    a.same_shape(b)?;
    let mut d: f64 = 0.0;
    for (la, lb) in a.intervals.iter().zip(&b.intervals) {
        for (ea, eb) in la.values().zip(lb.values()) {
            for (x, y) in ea.values.iter().zip(&eb.values) {
                d = d.max((x - y).abs());
            }
        }
    }
    Ok(d)
}

/// Everything the price map depends on besides the candidate price.
pub struct Context<'a> {
    pub batch: &'a ScenarioBatch,
    pub market: &'a MarketSpec,
    pub buckets: Buckets,
    pub kernel: TransitionKernel,
    pub solver: SolverOptions,
}

impl<'a> Context<'a> {
    pub fn new(batch: &'a ScenarioBatch, market: &'a MarketSpec, mode: KeyMode, solver: SolverOptions) -> Self {
        let buckets = bucket_indexed(&batch.node_path, &batch.spec, mode);
        let kernel = transition_matrix(&batch.spec);
        Context { batch, market, buckets, kernel, solver }
    }
}

#[derive(Debug, Clone)]
pub struct PhiOutput {
    pub price: DiscretePrice,
    /// Standard error of each output value, from the spread of the weighted integrands.
    pub stderr: DiscretePrice,
    pub informed: FbsdeSolution,
    pub standard: FbsdeSolution,
}

fn tag_agent(agent: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Agent { agent, source: Box::new(e) }
}

/// Solves both populations under `theta` and returns minus the weighted key-mean
/// of their adjoints.
pub fn apply_phi(theta: &DiscretePrice, ctx: &Context) -> Result<PhiOutput> {
    let batch = ctx.batch;
    let market = ctx.market;
    let paths = theta.paths(batch);
    let informed = solve(batch, &paths, &market.informed, &ctx.buckets, &ctx.kernel, &ctx.solver)
        .map_err(tag_agent("informed"))?;
    let standard = solve(batch, &paths, &market.standard, &ctx.buckets, &ctx.kernel, &ctx.solver)
        .map_err(tag_agent("standard"))?;
    let (price, stderr) = weighted_key_means(ctx, &informed, &standard);
    Ok(PhiOutput { price, stderr, informed, standard })
}

/// Key means of the weighted integrands `Σ_p n_p Λ̄^p bracket^p`. By the tower
/// property this is the key mean of the weighted adjoints, and undersized keys
/// borrow from neighbours exactly as the adjoint estimates do.
fn weighted_key_means(ctx: &Context, informed: &FbsdeSolution, standard: &FbsdeSolution) -> (DiscretePrice, DiscretePrice) {
    let market = ctx.market;
    let spec = ctx.batch.spec;
    let p = ctx.batch.points();
    let n = ctx.batch.count;
    let wi = market.informed.weight * market.informed.inv_lambda();
    let ws = market.standard.weight * market.standard.inv_lambda();
    let total = wi + ws;
    let mut price = DiscretePrice::zeros(&ctx.buckets);
    let mut stderr = price.clone();
    let mut z = vec![0.0; n];
    for (i, ib) in ctx.buckets.intervals.iter().enumerate() {
        for j in 0..=spec.m {
            let k = i * spec.m + j;
            for (s, zs) in z.iter_mut().enumerate() {
                *zs = wi * informed.bracket[s * p + k] + ws * standard.bracket[s * p + k];
            }
            let stats = bucket_means(ib, ctx.buckets.mode, &ctx.kernel, &z, ctx.solver.min_bucket);
            for (key, st) in ib.keys.iter().zip(&stats) {
                price.intervals[i].get_mut(&key.states).unwrap().values[j] = -st.mean / total;
                stderr.intervals[i].get_mut(&key.states).unwrap().values[j] = st.se / total;
            }
        }
    }
    (price, stderr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl FixedPointOptions {
    pub fn from_defaults(market: &MarketSpec) -> Self {
        FixedPointOptions { damping: market.defaults.damping, tol: market.defaults.tol, max_iter: market.defaults.max_iter }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Parameter(format!("damping {} outside (0, 1]", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Parameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sup norms seen at one iterate: the candidate, its image and both adjoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateBounds {
    pub sup_theta: f64,
    pub sup_image: f64,
    pub sup_y_informed: f64,
    pub sup_y_standard: f64,
}

impl IterateBounds {
    pub fn max(&self) -> f64 {
        self.sup_theta.max(self.sup_image).max(self.sup_y_informed).max(self.sup_y_standard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub sup_price: f64,
    pub sup_y_informed: f64,
    pub sup_y_standard: f64,
    /// Largest within-interval divided difference of the image price.
    pub time_lipschitz_max: f64,
    /// Largest divided difference after subtracting ten standard errors.
    pub time_lipschitz_excess: f64,
    pub cond_variation_price: Estimate,
    pub cond_variation_y_informed: Estimate,
    pub cond_variation_y_standard: Estimate,
}

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub price: DiscretePrice,
    pub iterations: usize,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    pub bounds_trace: Vec<IterateBounds>,
    pub diagnostics: Diagnostics,
    /// The map evaluated at the returned price.
    pub image: PhiOutput,
    pub warnings: Vec<String>,
}

pub fn solve_fixed_point(ctx: &Context, opts: &FixedPointOptions, init: Option<DiscretePrice>) -> Result<EquilibriumReport> {
    opts.check()?;
    let c_b = ctx.market.bounds().c_b();
    let mut theta = match init {
        Some(t) => t,
        None => DiscretePrice::zeros(&ctx.buckets),
    };
    let mut trace = Vec::new();
    let mut bounds_trace = Vec::new();
    let mut converged = false;
    for it in 1..=opts.max_iter {
        let phi = apply_phi(&theta, ctx)?;
        bounds_trace.push(iterate_bounds(&theta, &phi));
        let next = theta.blend(&phi.price, opts.damping)?;
        let d = price_metric(&next, &theta)?;
        trace.push(d);
        if d > 10.0 * c_b {
            return Err(Error::Divergence { iteration: it, residual: d, trace });
        }
        theta = next;
        if d <= opts.tol {
            converged = true;
            break;
        }
    }
    let image = apply_phi(&theta, ctx)?;
    bounds_trace.push(iterate_bounds(&theta, &image));
    let diagnostics = diagnostics(&theta, &image, ctx);
    let mut warnings = Vec::new();
    if ctx.buckets.mode == KeyMode::Markov {
        warnings.push("markov keys condition on the current lattice state only, an approximation of the full prefix".into());
    }
    let pooled = image.informed.pooled_keys + image.standard.pooled_keys;
    if pooled > 0 {
        warnings.push(format!("{pooled} undersized key/time cells used pooled neighbour estimates"));
    }
    Ok(EquilibriumReport {
        price: theta,
        iterations: trace.len(),
        residual_trace: trace,
        converged,
        bounds_trace,
        diagnostics,
        image,
        warnings,
    })
}

fn iterate_bounds(theta: &DiscretePrice, phi: &PhiOutput) -> IterateBounds {
    IterateBounds {
        sup_theta: theta.sup_abs(),
        sup_image: phi.price.sup_abs(),
        sup_y_informed: phi.informed.sup_y(),
        sup_y_standard: phi.standard.sup_y(),
    }
}

/// `Σ_j E|E[Z_{t_{j+1}} - Z_{t_j} | key at t_j]|` from bucket means; the reported
/// error is the sum of weighted bucket standard errors, the scale of the estimator
/// when the true conditional increments vanish.
pub fn conditional_variation(buckets: &Buckets, values: &[f64], points: usize) -> Estimate {
    let spec = buckets.spec;
    let n = buckets.sample_count();
    let mut value = 0.0;
    let mut se = 0.0;
    let mut inc = vec![0.0; n];
    for (j, ib) in buckets.intervals.iter().enumerate() {
        for (s, d) in inc.iter_mut().enumerate() {
            *d = values[s * points + (j + 1) * spec.m] - values[s * points + j * spec.m];
        }
        for members in &ib.members {
            let c = members.len() as f64;
            let mean = members.iter().map(|&s| inc[s]).sum::<f64>() / c;
            let var = if members.len() > 1 {
                members.iter().map(|&s| (inc[s] - mean).powi(2)).sum::<f64>() / (c - 1.0)
            } else {
                0.0
            };
            value += c / n as f64 * mean.abs();
            se += c / n as f64 * (var / c).sqrt();
        }
    }
    Estimate { value, se }
}

pub fn diagnostics(theta: &DiscretePrice, image: &PhiOutput, ctx: &Context) -> Diagnostics {
    let market = ctx.market;
    let spec = ctx.batch.spec;
    let p = ctx.batch.points();
    let dt = spec.dt();
    let wi = market.informed.weight * market.informed.inv_lambda();
    let ws = market.standard.weight * market.standard.inv_lambda();
    let total = wi + ws;
    let mut lip_max: f64 = 0.0;
    let mut lip_excess = f64::NEG_INFINITY;
    for (i, ib) in ctx.buckets.intervals.iter().enumerate() {
        for (b, key) in ib.keys.iter().enumerate() {
            let vals = &image.price.intervals[i][&key.states].values;
            let members = &ib.members[b];
            let c = members.len() as f64;
            for j in 0..spec.m {
                let k = i * spec.m + j;
                let diffs: Vec<f64> = members
                    .iter()
                    .map(|&s| {
                        let at = |k: usize| wi * image.informed.bracket[s * p + k] + ws * image.standard.bracket[s * p + k];
                        (at(k + 1) - at(k)) / total
                    })
                    .collect();
                let mean = diffs.iter().sum::<f64>() / c;
                let var = if members.len() > 1 {
                    diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (c - 1.0)
                } else {
                    0.0
                };
                let quotient = (vals[j + 1] - vals[j]).abs() / dt;
                lip_max = lip_max.max(quotient);
                lip_excess = lip_excess.max(quotient - 10.0 * (var / c).sqrt() / dt);
            }
        }
    }
    let paths = theta.paths(ctx.batch);
    Diagnostics {
        sup_price: theta.sup_abs().max(image.price.sup_abs()),
        sup_y_informed: image.informed.sup_y(),
        sup_y_standard: image.standard.sup_y(),
        time_lipschitz_max: lip_max,
        time_lipschitz_excess: lip_excess,
        cond_variation_price: conditional_variation(&ctx.buckets, &paths.cadlag, p),
        cond_variation_y_informed: conditional_variation(&ctx.buckets, &image.informed.y, p),
        cond_variation_y_standard: conditional_variation(&ctx.buckets, &image.standard.y, p),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalResidual {
    pub interval: usize,
    pub max_abs: f64,
    /// Largest `|gap| - 3 se` over the interval's keys.
    pub max_excess: f64,
    pub keys: usize,
    /// Fresh keys absent from the price, compared against its fallback values.
    pub unmatched: usize,
}

/// Out-of-sample fixed-point check: the map evaluated on an independent batch.
pub fn consistency_residual(price: &DiscretePrice, fresh: &ScenarioBatch, market: &MarketSpec, solver: SolverOptions) -> Result<Vec<IntervalResidual>> {
    if fresh.spec != price.spec {
        return Err(Error::Shape("fresh batch uses a different grid".into()));
    }
    let ctx = Context::new(fresh, market, price.mode, solver);
    let out = apply_phi(price, &ctx)?;
    let mut rows = Vec::new();
    for (i, level) in out.price.intervals.iter().enumerate() {
        let mut r = IntervalResidual { interval: i, max_abs: 0.0, max_excess: f64::NEG_INFINITY, keys: level.len(), unmatched: 0 };
        for (states, e) in level {
            let key = TreeKey { mode: price.mode, interval: i, states: states.clone() };
            let (old, fallback) = price.lookup(&key);
            r.unmatched += fallback as usize;
            let se = &out.stderr.intervals[i][states].values;
            for j in 0..e.values.len() {
                let gap = (e.values[j] - old[j]).abs();
                r.max_abs = r.max_abs.max(gap);
                r.max_excess = r.max_excess.max(gap - 3.0 * se[j]);
            }
        }
        rows.push(r);
    }
    Ok(rows)
}

/// Trapezoid estimate of `∫ min(1, |x - y|) dt`.
pub fn mz_distance(x: &[f64], y: &[f64], grid: &[f64]) -> f64 {
    let g: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b).abs().min(1.0)).collect();
    grid.windows(2).zip(g.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

#[derive(Debug, Clone)]
pub struct LevelResult {
    pub depth: u32,
    pub mode: KeyMode,
    pub report: EquilibriumReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementPair {
    pub coarse: u32,
    pub fine: u32,
    pub median: f64,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct RefinementReport {
    pub levels: Vec<LevelResult>,
    pub pairs: Vec<RefinementPair>,
}

impl RefinementReport {
    pub fn medians_decreasing(&self) -> bool {
        self.pairs.windows(2).all(|w| w[1].median < w[0].median)
    }
}

/// Solves the tree equilibrium at each depth on coarsened views of one fine batch
/// and compares neighbouring levels path by path.
pub fn refinement_study(
    market: &MarketSpec,
    levels: &[u32],
    batch: &ScenarioBatch,
    mode: Option<KeyMode>,
    solver: SolverOptions,
    opts: &FixedPointOptions,
) -> Result<RefinementReport> {
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("levels must be non-empty and strictly increasing".into()));
    }
    let mut results = Vec::new();
    let mut trajectories = Vec::new();
    for &depth in levels {
        let view = batch.at_level(depth)?;
        let key_mode = mode.unwrap_or_else(|| KeyMode::default_for(&view.spec));
        let mut level_market = market.clone();
        level_market.grid = view.spec;
        let ctx = Context::new(&view, &level_market, key_mode, solver);
        let report = solve_fixed_point(&ctx, opts, None)?;
        trajectories.push(report.price.paths(&view).cadlag);
        results.push(LevelResult { depth, mode: key_mode, report });
    }
    let p = batch.points();
    let mut pairs = Vec::new();
    for w in 0..levels.len().saturating_sub(1) {
        let (a, b) = (&trajectories[w], &trajectories[w + 1]);
        let mut d: Vec<f64> = (0..batch.count)
            .map(|s| mz_distance(&a[s * p..(s + 1) * p], &b[s * p..(s + 1) * p], &batch.fine_grid))
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.sort_by(f64::total_cmp);
        let median = if d.len() % 2 == 1 { d[d.len() / 2] } else { 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]) };
        pairs.push(RefinementPair { coarse: levels[w], fine: levels[w + 1], median, mean });
    }
    Ok(RefinementReport { levels: results, pairs })
}
