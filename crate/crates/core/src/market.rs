//! Finite markets driven by the mean-field price: the clearing residual and its
//! rate in the number of agents, and the single informed agent whose trades the
//! standard agents can read off the price.

use serde::{Deserialize, Serialize};

use crate::condexp::bucket_means;
use crate::equilibrium::{price_metric, solve_fixed_point, Context, DiscretePrice, EquilibriumReport, Estimate, FixedPointOptions};
use crate::error::{Error, Result};
use crate::fbsde::{env_at, optimal_control, DecouplingField, Information, SolverOptions};
use crate::io::fmt_real;
use crate::model::{AgentSpec, CostMode, EnvFn, MarketSpec};
use crate::noise_tree::{Buckets, TreeKey};
use crate::paths::{mix_index, normal, sample_batch, stream_rng, tag, ScenarioBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScaling {
    /// The informed agent's penalty as in the mean-field problem.
    MeanField,
    /// Penalty `Λ^I / N_S`: the informed agent trades `N_S` times harder.
    FiniteMarket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InformedScenario {
    pub n_standard: usize,
    pub rho: f64,
    pub penalty: PenaltyScaling,
}

impl InformedScenario {
    pub fn check(&self) -> Result<()> {
        if self.n_standard == 0 {
            return Err(Error::Parameter("the standard population needs at least one agent".into()));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::Parameter(format!("factor correlation {} outside [-1, 1]", self.rho)));
        }
        Ok(())
    }

    fn trade_scale(&self) -> f64 {
        match self.penalty {
            PenaltyScaling::MeanField => 1.0,
            PenaltyScaling::FiniteMarket => self.n_standard as f64,
        }
    }
}

/// The mean-field price together with each population's decoupling field, enough
/// to run any number of agents forward on fresh scenarios.
pub struct ClearingSetup<'a> {
    pub market: &'a MarketSpec,
    pub price: &'a DiscretePrice,
    pub buckets: &'a Buckets,
    pub fields: [&'a DecouplingField; 2],
    pub informed_info: Information,
}

impl<'a> ClearingSetup<'a> {
    pub fn new(ctx: &'a Context, report: &'a EquilibriumReport) -> Result<Self> {
        if report.price.spec != ctx.buckets.spec || report.price.mode != ctx.buckets.mode {
            return Err(Error::Shape("price and model were built on different trees".into()));
        }
        Ok(ClearingSetup {
            market: ctx.market,
            price: &report.price,
            buckets: &ctx.buckets,
            fields: [&report.image.informed.field, &report.image.standard.field],
            informed_info: ctx.solver.informed_info,
        })
    }

    fn agent(&self, pop: usize) -> &AgentSpec {
        self.market.agents()[pop]
    }

    /// Feature layout matching the solver: `[X]` for convex costs, then `B`, then
    /// `C` for the informed population, whenever the solver regressed at all.
    fn features(&self, pop: usize) -> (bool, bool, bool) {
        let agent = self.agent(pop);
        let convex = agent.cost_mode() == CostMode::GeneralConvex;
        let informed = agent.population.is_informed();
        let regress = convex || (informed && self.informed_info == Information::KeyCommonFactor);
        (convex, regress, regress && informed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClearingOptions {
    /// Common-noise scenarios per seed.
    pub scenarios: usize,
    /// Agents per population used to estimate each scenario's conditional means.
    pub cohort: usize,
}

impl Default for ClearingOptions {
    fn default() -> Self {
        ClearingOptions { scenarios: 100, cohort: 4096 }
    }
}

const COHORT_OFFSET: u64 = 1 << 40;

/// One scenario: adjoint paths of the market's agents and the cohort moments.
struct ScenarioRun {
    agents: [Vec<Vec<f64>>; 2],
    mean: [Vec<f64>; 2],
    var: [Vec<f64>; 2],
}

fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let shift = values[0];
    shift + values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64
}

fn simulate_agent(setup: &ClearingSetup, pop: usize, scen: &ScenarioBatch, s: usize, price: &[f64], buckets: &[Option<usize>], seed: u64, id: u64) -> Vec<f64> {
    let agent = setup.agent(pop);
    let field = setup.fields[pop];
    let (with_x, regress, with_c) = setup.features(pop);
    let stream = mix_index(&[s as u64, pop as u64, id]);
    let mut noise = stream_rng(seed, stream, tag::AGENT);
    let mut x = agent.init.draw(&mut stream_rng(seed, stream, tag::AGENT_INIT));
    let p = scen.points();
    let dt = scen.spec.dt();
    let sd = dt.sqrt();
    let b = scen.b_path(s);
    let c = scen.c_path(s);
    let mut y = vec![0.0; p];
    let mut point = Vec::with_capacity(3);
    for k in 0..p {
        let (i, _) = scen.spec.locate(k);
        let fit = match buckets[i] {
            Some(bk) => &field.fits[k][bk],
            None => &field.pooled[k],
        };
        point.clear();
        if with_x {
            point.push(x);
        }
        if regress {
            point.push(b[k]);
        }
        if with_c {
            point.push(c[k]);
        }
        y[k] = fit.predict(&point);
        if k + 1 < p {
            let e = env_at(agent, scen, s, k, price[k]);
            let alpha = optimal_control(y[k], price[k], agent.lambda);
            x += (alpha + agent.drift.eval(&e)) * dt
                + agent.vol_common.eval(&e) * (b[k + 1] - b[k])
                + agent.vol_idio.eval(&e) * sd * normal(&mut noise);
        }
    }
    y
}

fn run_scenario(setup: &ClearingSetup, scen: &ScenarioBatch, s: usize, price: &[f64], agents: [usize; 2], cohort: usize, seed: u64) -> ScenarioRun {
    let spec = scen.spec;
    let buckets: Vec<Option<usize>> = (0..spec.intervals())
        .map(|i| setup.buckets.intervals[i].find(&TreeKey::new(setup.buckets.mode, i, &scen.node_path[s])))
        .collect();
    let p = scen.points();
    let mut run = ScenarioRun { agents: [Vec::new(), Vec::new()], mean: [vec![0.0; p], vec![0.0; p]], var: [vec![0.0; p], vec![0.0; p]] };
    for pop in 0..2 {
        run.agents[pop] = (0..agents[pop] as u64).map(|j| simulate_agent(setup, pop, scen, s, price, &buckets, seed, j)).collect();
        let ref_paths: Vec<Vec<f64>> = (0..cohort as u64)
            .map(|j| simulate_agent(setup, pop, scen, s, price, &buckets, seed, COHORT_OFFSET + j))
            .collect();
        let mut col = vec![0.0; cohort];
        for k in 0..p {
            for (v, path) in col.iter_mut().zip(&ref_paths) {
                *v = path[k];
            }
            let m = sorted_mean(&mut col);
            let var = if cohort > 1 { col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (cohort - 1) as f64 } else { 0.0 };
            run.mean[pop][k] = m;
            run.var[pop][k] = var;
        }
    }
    run
}

/// `∫ |average trade|² dt` for the first `counts[p]` agents of each population,
/// less the part contributed by the cohort's own sampling error.
fn scenario_residual(setup: &ClearingSetup, run: &ScenarioRun, counts: [usize; 2], cohort: usize, grid: &[f64]) -> f64 {
    let market = setup.market;
    let agents = market.agents();
    let inv = [agents[0].inv_lambda(), agents[1].inv_lambda()];
    let mf = [agents[0].weight * inv[0], agents[1].weight * inv[1]];
    let total = mf[0] + mf[1];
    let n = (counts[0] + counts[1]) as f64;
    let share = [counts[0] as f64 / n * inv[0], counts[1] as f64 / n * inv[1]];
    let p = grid.len();
    let mut g = vec![0.0; p];
    let mut col = Vec::new();
    for (k, gk) in g.iter_mut().enumerate() {
        let price = -(mf[0] * run.mean[0][k] + mf[1] * run.mean[1][k]) / total;
        let mut avg = 0.0;
        for pop in 0..2 {
            if counts[pop] == 0 {
                continue;
            }
            col.clear();
            col.extend(run.agents[pop][..counts[pop]].iter().map(|path| path[k]));
            avg -= share[pop] * (sorted_mean(&mut col) + price);
        }
        let lift = (share[0] + share[1]) / total;
        let noise = lift * lift * (0..2).map(|q| mf[q] * mf[q] * run.var[q][k]).sum::<f64>() / cohort as f64;
        *gk = avg * avg - noise;
    }
    grid.windows(2).zip(g.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

fn scenario_batch(setup: &ClearingSetup, seed: u64, count: usize) -> Result<ScenarioBatch> {
    let market = setup.market;
    sample_batch(&market.grid, mix_index(&[seed, 0xC1EA]), count, &market.factor, market.init_laws())
}

fn check_counts(counts: [usize; 2], opts: &ClearingOptions) -> Result<()> {
    if counts[0] + counts[1] == 0 {
        return Err(Error::Input("the market needs at least one agent".into()));
    }
    if opts.scenarios < 2 || opts.cohort < 2 {
        return Err(Error::Input("clearing needs at least two scenarios and a cohort of two".into()));
    }
    Ok(())
}

fn mean_se(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Estimate { value: mean, se: (var / n).sqrt() }
}

/// Estimate of `E ∫ |(1/N) Σ_j α_j|² dt` for `n_informed + n_standard` agents
/// trading at the mean-field price.
pub fn clearing_residual(setup: &ClearingSetup, n_informed: usize, n_standard: usize, seed: u64, opts: &ClearingOptions) -> Result<Estimate> {
    let counts = [n_informed, n_standard];
    check_counts(counts, opts)?;
    Ok(mean_se(&per_scenario(setup, &[counts], seed, opts)?[0]))
}

/// Residual of every market size on every scenario of one seed, with agents shared
/// across sizes (the smaller market is a prefix of the larger).
fn per_scenario(setup: &ClearingSetup, sizes: &[[usize; 2]], seed: u64, opts: &ClearingOptions) -> Result<Vec<Vec<f64>>> {
    let scen = scenario_batch(setup, seed, opts.scenarios)?;
    let paths = setup.price.paths(&scen);
    let most = [sizes.iter().map(|c| c[0]).max().unwrap_or(0), sizes.iter().map(|c| c[1]).max().unwrap_or(0)];
    let mut out = vec![Vec::with_capacity(opts.scenarios); sizes.len()];
    for s in 0..opts.scenarios {
        let (price, _) = paths.row(s);
        let run = run_scenario(setup, &scen, s, price, most, opts.cohort, seed);
        for (row, &counts) in out.iter_mut().zip(sizes) {
            row.push(scenario_residual(setup, &run, counts, opts.cohort, &scen.fine_grid));
        }
    }
    Ok(out)
}

/// Per-size results of the clearing experiment and the fitted rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearingReport {
    pub n_values: Vec<usize>,
    pub residuals: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `8 T C_B² Σ_p (Λ̄^p)² / N`
    pub bounds: Vec<f64>,
    /// `None` when every residual is zero: the market clears exactly.
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
}

impl ClearingReport {
    pub fn exact_clearing(&self) -> bool {
        self.residuals.iter().all(|&r| r == 0.0)
    }

    pub fn within_bounds(&self) -> bool {
        self.residuals.iter().zip(&self.stderr).zip(&self.bounds).all(|((r, se), b)| *r <= b + 3.0 * se)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,residual,stderr,bound\n");
        for i in 0..self.n_values.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.n_values[i],
                fmt_real(self.residuals[i]),
                fmt_real(self.stderr[i]),
                fmt_real(self.bounds[i])
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        match (self.slope, self.slope_se) {
            (Some(s), Some(se)) => format!("slope={} stderr={}", fmt_real(s), fmt_real(se)),
            _ => "slope=undefined exact clearing".into(),
        }
    }
}

pub fn bound_constant(market: &MarketSpec) -> f64 {
    let c_b = market.bounds().c_b();
    let lam: f64 = market.agents().iter().map(|a| a.inv_lambda().powi(2)).sum();
    8.0 * market.grid.horizon * c_b * c_b * lam
}

/// Residuals for markets of `n_values` agents split evenly between the
/// populations, averaged over seeds, with a log-log fit of the rate.
pub fn rate_study(setup: &ClearingSetup, n_values: &[usize], seeds: &[u64], opts: &ClearingOptions) -> Result<ClearingReport> {
    if n_values.len() < 4 {
        return Err(Error::Input(format!("a rate needs at least 4 market sizes, got {}", n_values.len())));
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) || n_values[0] < 2 {
        return Err(Error::Input("market sizes must be strictly increasing and at least 2".into()));
    }
    if n_values[n_values.len() - 1] < 4 * n_values[0] {
        return Err(Error::Input("market sizes must span at least two octaves".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Input("at least one seed is required".into()));
    }
    let sizes: Vec<[usize; 2]> = n_values.iter().map(|&n| [n / 2, n - n / 2]).collect();
    check_counts(sizes[0], opts)?;
    let mut all = vec![Vec::new(); sizes.len()];
    for &seed in seeds {
        for (acc, row) in all.iter_mut().zip(per_scenario(setup, &sizes, seed, opts)?) {
            acc.extend(row);
        }
    }
    let est: Vec<Estimate> = all.iter().map(|v| mean_se(v)).collect();
    let constant = bound_constant(setup.market);
    let mut report = ClearingReport {
        n_values: n_values.to_vec(),
        residuals: est.iter().map(|e| e.value).collect(),
        stderr: est.iter().map(|e| e.se).collect(),
        bounds: n_values.iter().map(|&n| constant / n as f64).collect(),
        slope: None,
        slope_se: None,
    };
    if report.exact_clearing() {
        return Ok(report);
    }
    if report.residuals.iter().any(|&r| r <= 0.0) {
        return Err(Error::Estimation("non-positive residual; log-log regression is degenerate".into()));
    }
    let xs: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = report.residuals.iter().map(|r| r.ln()).collect();
    let (slope, se) = ols_slope(&xs, &ys);
    report.slope = Some(slope);
    report.slope_se = Some(se);
    Ok(report)
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    (slope, (ssr / (n - 2.0) / sxx).sqrt())
}

/// Mean product of two agents' deviations from the scenario's conditional mean,
/// per population, at the middle of the horizon.
pub fn conditional_covariance(setup: &ClearingSetup, seed: u64, pairs: usize, opts: &ClearingOptions) -> Result<[Estimate; 2]> {
    check_counts([2 * pairs, 2 * pairs], opts)?;
    let scen = scenario_batch(setup, seed, opts.scenarios)?;
    let paths = setup.price.paths(&scen);
    let k = scen.points() / 2;
    let mut products = [Vec::new(), Vec::new()];
    for s in 0..opts.scenarios {
        let (price, _) = paths.row(s);
        let run = run_scenario(setup, &scen, s, price, [2 * pairs, 2 * pairs], opts.cohort, seed);
        for pop in 0..2 {
            for j in 0..pairs {
                let a = run.agents[pop][2 * j][k] - run.mean[pop][k];
                let b = run.agents[pop][2 * j + 1][k] - run.mean[pop][k];
                products[pop].push(a * b);
            }
        }
    }
    Ok([mean_se(&products[0]), mean_se(&products[1])])
}

/// Worst sample of one fine time in the inference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceRow {
    pub t: f64,
    pub beta_direct: f64,
    pub beta_inferred: f64,
    pub gap: f64,
    /// Allowed gap: three standard errors of the standard agents' key mean.
    pub limit: f64,
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub rows: Vec<InferenceRow>,
    pub max_gap: f64,
    pub passed: bool,
    pub equilibrium: EquilibriumReport,
}

impl InferenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta_direct,beta_inferred,gap\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", fmt_real(r.t), fmt_real(r.beta_direct), fmt_real(r.beta_inferred), fmt_real(r.gap)));
        }
        out
    }
}

/// The market of one informed agent facing a continuum of standard agents.
pub fn informed_market(scenario: &InformedScenario, market: &MarketSpec) -> Result<MarketSpec> {
    scenario.check()?;
    if market.informed.cost_mode() != CostMode::Affine || market.standard.cost_mode() != CostMode::Affine {
        return Err(Error::Precondition("the informed-agent scenario needs affine costs".into()));
    }
    if market.informed.uses_factor() {
        return Err(Error::Precondition(
            "informed costs must depend on the price and the common noise only, not on the private factor".into(),
        ));
    }
    let mut m = market.clone();
    m.informed.weight = 0.5;
    m.standard.weight = 0.5;
    m.informed.vol_idio = EnvFn::Const(0.0);
    m.factor.rho = scenario.rho;
    m.check()?;
    Ok(m)
}

/// Solves the informed-agent equilibrium and compares the informed trade with
/// what the standard agents infer from the price and their own key mean.
pub fn informed_inference_check(
    scenario: &InformedScenario,
    market: &MarketSpec,
    batch: &ScenarioBatch,
    mode: crate::noise_tree::KeyMode,
    solver: SolverOptions,
    opts: &FixedPointOptions,
) -> Result<InferenceReport> {
    let m = informed_market(scenario, market)?;
    if batch.spec != m.grid {
        return Err(Error::Shape("batch grid differs from the model grid".into()));
    }
    let solver = SolverOptions { informed_info: Information::Key, ..solver };
    let ctx = Context::new(batch, &m, mode, solver);
    let eq = solve_fixed_point(&ctx, opts, None)?;
    let scale = scenario.trade_scale();
    let inv_i = m.informed.inv_lambda();
    let inv_s = m.standard.inv_lambda();
    let paths = eq.price.paths(batch);
    let p = batch.points();
    let spec = batch.spec;
    let informed = &eq.image.informed;
    let standard = &eq.image.standard;
    // the identity is exact at a fixed point; the iterate misses it by this much
    let fixed_gap = (inv_i + inv_s) * price_metric(&eq.image.price, &eq.price)?;
    let mut rows = Vec::with_capacity(p);
    let mut passed = true;
    let mut max_gap: f64 = 0.0;
    let mut col = vec![0.0; batch.count];
    let mut brk = vec![0.0; batch.count];
    for k in 0..p {
        let (i, _) = spec.locate(k);
        let ib = &ctx.buckets.intervals[i];
        for s in 0..batch.count {
            col[s] = standard.y[s * p + k];
            brk[s] = standard.bracket[s * p + k];
        }
        let stats = bucket_means(ib, ctx.buckets.mode, &ctx.kernel, &brk, ctx.solver.min_bucket);
        let means: Vec<f64> = ib
            .members
            .iter()
            .map(|mem| {
                let mut v: Vec<f64> = mem.iter().map(|&s| col[s]).collect();
                sorted_mean(&mut v)
            })
            .collect();
        let mut worst: Option<InferenceRow> = None;
        for s in 0..batch.count {
            let b = ib.of_sample[s];
            let price = paths.cadlag[s * p + k];
            let direct = scale * -inv_i * (informed.y[s * p + k] + price);
            let inferred = scale * inv_s * (price + means[b]);
            let gap = (direct - inferred).abs();
            let limit = scale * (3.0 * inv_s * stats[b].se + fixed_gap) + 1e-12;
            passed &= gap <= limit;
            if worst.is_none_or(|w| gap > w.gap) {
                worst = Some(InferenceRow { t: batch.fine_grid[k], beta_direct: direct, beta_inferred: inferred, gap, limit });
            }
        }
        let w = worst.expect("batch has samples");
        max_gap = max_gap.max(w.gap);
        rows.push(w);
    }
    Ok(InferenceReport { rows, max_gap, passed, equilibrium: eq })
}
