//! Coefficient catalog, agent specifications, validation probes and presets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{InformedScenario, PenaltyScaling};
use crate::noise_tree::GridSpec;
use crate::paths::{stream_rng, tag, InformedFactorSpec, InitLaw};

/// Point at which coefficients are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Env {
    pub t: f64,
    pub price: f64,
    pub common: f64,
    /// Informed factor; standard agents never read it.
    pub factor: f64,
}

/// Scalar function of `(t, price, B, C)` from the registered catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvFn {
    Const(f64),
    /// `level + common·B + factor·C + price·ϖ`
    Linear { level: f64, common: f64, factor: f64, price: f64 },
    /// `clamp(scale·B, -cap, cap)`
    ClampedCommon { scale: f64, cap: f64 },
    /// `level + common·tanh(s·B) + factor·tanh(s·C) + price·tanh(s·ϖ)`
    TanhMix { level: f64, common: f64, factor: f64, price: f64, scale: f64 },
}

impl EnvFn {
    pub fn zero() -> Self {
        EnvFn::Const(0.0)
    }

    pub fn eval(&self, e: &Env) -> f64 {
        match *self {
            EnvFn::Const(v) => v,
            EnvFn::Linear { level, common, factor, price } => {
                level + common * e.common + factor * e.factor + price * e.price
            }
            EnvFn::ClampedCommon { scale, cap } => (scale * e.common).clamp(-cap, cap),
            EnvFn::TanhMix { level, common, factor, price, scale } => {
                level
                    + common * (scale * e.common).tanh()
                    + factor * (scale * e.factor).tanh()
                    + price * (scale * e.price).tanh()
            }
        }
    }

    pub fn uses_factor(&self) -> bool {
        match *self {
            EnvFn::Linear { factor, .. } | EnvFn::TanhMix { factor, .. } => factor != 0.0,
            _ => false,
        }
    }

    pub fn uses_price(&self) -> bool {
        match *self {
            EnvFn::Linear { price, .. } | EnvFn::TanhMix { price, .. } => price != 0.0,
            _ => false,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == EnvFn::Const(0.0)
    }

    pub fn check(&self) -> Result<()> {
        let finite = match *self {
            EnvFn::Const(v) => v.is_finite(),
            EnvFn::Linear { level, common, factor, price } => {
                [level, common, factor, price].iter().all(|v| v.is_finite())
            }
            EnvFn::ClampedCommon { scale, cap } => scale.is_finite() && cap.is_finite() && cap >= 0.0,
            EnvFn::TanhMix { level, common, factor, price, scale } => {
                [level, common, factor, price, scale].iter().all(|v| v.is_finite())
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Model(format!("coefficient {self:?} has invalid parameters")))
        }
    }
}

/// State-dependent cost for the general convex mode: a value and its x-derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateCost {
    /// `x·slope(env)`
    Linear(EnvFn),
    /// `amp·log cosh(x - center(env))`
    LogCosh { amp: f64, center: EnvFn },
    /// `k x² / 2`
    Quadratic { k: f64 },
}

fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl StateCost {
    pub fn value(&self, x: f64, e: &Env) -> f64 {
        match self {
            StateCost::Linear(slope) => x * slope.eval(e),
            StateCost::LogCosh { amp, center } => amp * log_cosh(x - center.eval(e)),
            StateCost::Quadratic { k } => 0.5 * k * x * x,
        }
    }

    pub fn dx(&self, x: f64, e: &Env) -> f64 {
        match self {
            StateCost::Linear(slope) => slope.eval(e),
            StateCost::LogCosh { amp, center } => amp * (x - center.eval(e)).tanh(),
            StateCost::Quadratic { k } => k * x,
        }
    }

    pub fn depends_on_state(&self) -> bool {
        !matches!(self, StateCost::Linear(_))
    }

    fn env_fns(&self) -> Vec<&EnvFn> {
        match self {
            StateCost::Linear(f) => vec![f],
            StateCost::LogCosh { center, .. } => vec![center],
            StateCost::Quadratic { .. } => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Costs {
    /// Running cost `x·c(t, χ)`, terminal cost `x·ḡ(χ)`.
    Affine { running: EnvFn, terminal: EnvFn },
    GeneralConvex { running: StateCost, terminal: StateCost },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Affine,
    GeneralConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    Informed,
    Standard,
}

impl Population {
    pub fn name(&self) -> &'static str {
        match self {
            Population::Informed => "informed",
            Population::Standard => "standard",
        }
    }

    pub fn is_informed(&self) -> bool {
        *self == Population::Informed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub population: Population,
    /// Quadratic control penalty Λ.
    pub lambda: f64,
    /// Population share n_p.
    pub weight: f64,
    pub drift: EnvFn,
    pub vol_common: EnvFn,
    pub vol_idio: EnvFn,
    pub costs: Costs,
    pub init: InitLaw,
}

impl AgentSpec {
    pub fn inv_lambda(&self) -> f64 {
        1.0 / self.lambda
    }

    pub fn cost_mode(&self) -> CostMode {
        match self.costs {
            Costs::Affine { .. } => CostMode::Affine,
            Costs::GeneralConvex { .. } => CostMode::GeneralConvex,
        }
    }

    pub fn running_dx(&self, x: f64, e: &Env) -> f64 {
        match &self.costs {
            Costs::Affine { running, .. } => running.eval(e),
            Costs::GeneralConvex { running, .. } => running.dx(x, e),
        }
    }

    pub fn terminal_dx(&self, x: f64, e: &Env) -> f64 {
        match &self.costs {
            Costs::Affine { terminal, .. } => terminal.eval(e),
            Costs::GeneralConvex { terminal, .. } => terminal.dx(x, e),
        }
    }

    pub fn running_value(&self, x: f64, e: &Env) -> f64 {
        match &self.costs {
            Costs::Affine { running, .. } => x * running.eval(e),
            Costs::GeneralConvex { running, .. } => running.value(x, e),
        }
    }

    pub fn terminal_value(&self, x: f64, e: &Env) -> f64 {
        match &self.costs {
            Costs::Affine { terminal, .. } => x * terminal.eval(e),
            Costs::GeneralConvex { terminal, .. } => terminal.value(x, e),
        }
    }

    fn env_fns(&self) -> Vec<&EnvFn> {
        let mut fns = vec![&self.drift, &self.vol_common, &self.vol_idio];
        match &self.costs {
            Costs::Affine { running, terminal } => {
                fns.push(running);
                fns.push(terminal);
            }
            Costs::GeneralConvex { running, terminal } => {
                fns.extend(running.env_fns());
                fns.extend(terminal.env_fns());
            }
        }
        fns
    }

    pub fn uses_factor(&self) -> bool {
        self.env_fns().iter().any(|f| f.uses_factor())
    }

    /// Whether the adjoint can depend on the agent's own state.
    pub fn state_dependent(&self) -> bool {
        match &self.costs {
            Costs::Affine { .. } => false,
            Costs::GeneralConvex { running, terminal } => {
                running.depends_on_state() || terminal.depends_on_state()
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Model(format!("{}: penalty must be positive", self.population.name())));
        }
        if !(self.weight > 0.0 && self.weight < 1.0) {
            return Err(Error::Model(format!("{}: weight must lie in (0, 1)", self.population.name())));
        }
        for f in self.env_fns() {
            f.check()?;
        }
        if let Costs::GeneralConvex { running, terminal } = &self.costs {
            for c in [running, terminal] {
                let ok = match c {
                    StateCost::LogCosh { amp, .. } => amp.is_finite(),
                    StateCost::Quadratic { k } => k.is_finite(),
                    StateCost::Linear(_) => true,
                };
                if !ok {
                    return Err(Error::Model(format!("{}: invalid cost parameters", self.population.name())));
                }
            }
        }
        self.init.check()?;
        if self.population == Population::Standard && self.uses_factor() {
            return Err(Error::Model("standard agents cannot observe the informed factor".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelBounds {
    /// Coefficient bound L.
    pub l: f64,
    pub horizon: f64,
}

impl ModelBounds {
    /// Uniform bound on adjoints and prices, `L (1 + T)`.
    pub fn c_b(&self) -> f64 {
        self.l * (1.0 + self.horizon)
    }
}

/// Solver settings a preset recommends; every field can be overridden per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDefaults {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub name: String,
    pub grid: GridSpec,
    /// Coefficient bound L.
    pub bound: f64,
    pub informed: AgentSpec,
    pub standard: AgentSpec,
    pub factor: InformedFactorSpec,
    #[serde(rename = "run")]
    pub defaults: RunDefaults,
    pub scenario: InformedScenario,
}

impl MarketSpec {
    pub fn bounds(&self) -> ModelBounds {
        ModelBounds { l: self.bound, horizon: self.grid.horizon }
    }

    pub fn agents(&self) -> [&AgentSpec; 2] {
        [&self.informed, &self.standard]
    }

    /// `n_I/Λ_I + n_S/Λ_S`, the normalizer of the price map.
    pub fn price_weight(&self) -> f64 {
        self.informed.weight * self.informed.inv_lambda() + self.standard.weight * self.standard.inv_lambda()
    }

    pub fn check(&self) -> Result<()> {
        self.grid.check()?;
        self.factor.check()?;
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::Model("coefficient bound L must be positive".into()));
        }
        if self.informed.population != Population::Informed || self.standard.population != Population::Standard {
            return Err(Error::Model("agent slots hold the wrong populations".into()));
        }
        self.informed.check()?;
        self.standard.check()?;
        let total = self.informed.weight + self.standard.weight;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Model(format!("population weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn init_laws(&self) -> [InitLaw; 2] {
        [self.informed.init, self.standard.init]
    }
}

pub const PRESET_NAMES: [&str; 5] =
    ["zero", "deterministic", "terminal-common-noise", "single-informed", "general-convex"];

fn agent(population: Population, costs: Costs) -> AgentSpec {
    AgentSpec {
        population,
        lambda: 1.0,
        weight: 0.5,
        drift: EnvFn::zero(),
        vol_common: EnvFn::Const(0.5),
        vol_idio: EnvFn::Const(0.5),
        costs,
        init: InitLaw::Point(0.0),
    }
}

fn tanh_mix(common: f64, factor: f64, price: f64) -> EnvFn {
    EnvFn::TanhMix { level: 0.0, common, factor, price, scale: 1.0 }
}

/// Terminal value of the deterministic preset.
pub const DETERMINISTIC_G0: f64 = 0.25;
/// Running value of the deterministic preset.
pub const DETERMINISTIC_C0: f64 = 0.5;

pub fn preset(name: &str) -> Result<MarketSpec> {
    let grid = GridSpec::new(2, 1, 4, 1.0)?;
    let affine = |running: EnvFn, terminal: EnvFn| Costs::Affine { running, terminal };
    // Φ ignores θ on the first three presets, so an undamped step is already exact
    let static_map = RunDefaults { damping: 1.0, tol: 1e-10, max_iter: 20, samples: 2000 };
    let scenario = InformedScenario { n_standard: 10, rho: 0.5, penalty: PenaltyScaling::MeanField };
    let mut spec = MarketSpec {
        name: name.to_string(),
        grid,
        bound: 1.0,
        informed: agent(Population::Informed, affine(EnvFn::zero(), EnvFn::zero())),
        standard: agent(Population::Standard, affine(EnvFn::zero(), EnvFn::zero())),
        factor: InformedFactorSpec::correlated(0.5),
        defaults: static_map,
        scenario,
    };
    match name {
        "zero" => {}
        "deterministic" => {
            for a in [&mut spec.informed, &mut spec.standard] {
                a.costs = affine(EnvFn::Const(DETERMINISTIC_C0), EnvFn::Const(DETERMINISTIC_G0));
            }
        }
        "terminal-common-noise" => {
            spec.bound = 4.0;
            for a in [&mut spec.informed, &mut spec.standard] {
                a.costs = affine(EnvFn::zero(), EnvFn::ClampedCommon { scale: 1.0, cap: 4.0 });
            }
            spec.defaults = RunDefaults { damping: 1.0, tol: 1e-3, max_iter: 20, samples: 100_000 };
        }
        "single-informed" => {
            spec.informed.costs = affine(tanh_mix(0.3, 0.0, 0.0), tanh_mix(0.5, 0.0, 0.2));
            spec.standard.costs = affine(tanh_mix(0.0, 0.0, 0.2), tanh_mix(0.4, 0.0, 0.0));
            spec.defaults = RunDefaults { damping: 0.5, tol: 1e-10, max_iter: 200, samples: 20_000 };
        }
        "general-convex" => {
            let centered = |common: f64, factor: f64| StateCost::LogCosh {
                amp: 1.0,
                center: EnvFn::Linear { level: 0.0, common, factor, price: 0.0 },
            };
            spec.informed.costs =
                Costs::GeneralConvex { running: centered(0.0, 0.5), terminal: centered(0.0, 0.5) };
            spec.standard.costs =
                Costs::GeneralConvex { running: centered(0.5, 0.0), terminal: centered(0.5, 0.0) };
            for a in [&mut spec.informed, &mut spec.standard] {
                a.vol_common = EnvFn::Const(0.3);
                a.init = InitLaw::Gaussian { mean: 0.0, sd: 0.5 };
            }
            spec.defaults = RunDefaults { damping: 0.5, tol: 1e-4, max_iter: 100, samples: 4000 };
        }
        other => {
            return Err(Error::Input(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    }
    spec.check()?;
    Ok(spec)
}

/// Region sampled by the validator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBox {
    pub x: f64,
    pub price: f64,
    pub common: f64,
    pub factor: f64,
}

impl ProbeBox {
    pub fn for_bounds(bounds: &ModelBounds) -> Self {
        ProbeBox { x: 10.0, price: bounds.c_b(), common: 4.0, factor: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub limit: f64,
    pub passed: bool,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub population: Population,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker {
    name: &'static str,
    limit: f64,
    worst: f64,
    location: String,
    /// true: the quantity must stay at or below the limit; false: at or above.
    upper: bool,
}

impl Tracker {
    fn new(name: &'static str, limit: f64, upper: bool) -> Self {
        let worst = if upper { f64::NEG_INFINITY } else { f64::INFINITY };
        Tracker { name, limit, worst, location: String::new(), upper }
    }

    fn see(&mut self, v: f64, x: f64, e: &Env) {
        let worse = if self.upper { v > self.worst } else { v < self.worst };
        if worse {
            self.worst = v;
            self.location = format!("t={:.4} x={:.4} price={:.4} B={:.4} C={:.4}", e.t, x, e.price, e.common, e.factor);
        }
    }

    fn finish(self) -> Check {
        let passed = if self.upper { self.worst <= self.limit } else { self.worst >= self.limit };
        Check { name: self.name, worst: self.worst, limit: self.limit, passed, location: self.location }
    }
}

fn finite(v: f64, what: &str, x: f64, e: &Env) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Model(format!("{what} is not finite at x={x}, {e:?}")))
    }
}

/// Sampling-based check of the coefficient assumptions on a probe box.
pub fn validate(agent: &AgentSpec, bounds: &ModelBounds, probe_budget: usize, region: &ProbeBox) -> Result<ValidationReport> {
    if probe_budget == 0 {
        return Err(Error::Input("probe budget must be at least 1".into()));
    }
    let l = bounds.l;
    let h_lip = 1e-3;
    let h_fd = 1e-5;
    let mut growth = Tracker::new("coefficient growth", 1.0, true);
    let mut run_bound = Tracker::new("running derivative bound", l, true);
    let mut term_bound = Tracker::new("terminal derivative bound", l, true);
    let mut run_lip = Tracker::new("running derivative lipschitz", l, true);
    let mut term_lip = Tracker::new("terminal derivative lipschitz", l, true);
    let mut run_cvx = Tracker::new("running convexity", -1e-9, false);
    let mut term_cvx = Tracker::new("terminal convexity", -1e-9, false);
    let mut run_fd = Tracker::new("running derivative vs finite difference", 1e-6, true);
    let mut term_fd = Tracker::new("terminal derivative vs finite difference", 1e-6, true);
    let mut blind = Tracker::new("factor blindness", 0.0, true);
    let mut rng = stream_rng(0x005e_ed0f_c0ef, agent.population as u64, tag::PROBE);
    let mut u = |half: f64| half * (2.0 * rng.random::<f64>() - 1.0);
    for _ in 0..probe_budget {
        let e = Env {
            t: bounds.horizon * 0.5 * (1.0 + u(1.0)),
            price: u(region.price),
            common: u(region.common),
            factor: u(region.factor),
        };
        let x = u(region.x);
        let y = u(region.x);
        let coef = finite(agent.drift.eval(&e), "drift", x, &e)?.abs()
            + finite(agent.vol_common.eval(&e), "common volatility", x, &e)?.abs()
            + finite(agent.vol_idio.eval(&e), "idiosyncratic volatility", x, &e)?.abs();
        growth.see(coef / (l * (1.0 + e.price.abs())), x, &e);

        type Field<'a> = &'a dyn Fn(f64, &Env) -> f64;
        let checks: [(Field, Field, &mut Tracker, &mut Tracker, &mut Tracker, &mut Tracker); 2] = [
            (
                &|x, e| agent.running_dx(x, e),
                &|x, e| agent.running_value(x, e),
                &mut run_bound,
                &mut run_lip,
                &mut run_cvx,
                &mut run_fd,
            ),
            (
                &|x, e| agent.terminal_dx(x, e),
                &|x, e| agent.terminal_value(x, e),
                &mut term_bound,
                &mut term_lip,
                &mut term_cvx,
                &mut term_fd,
            ),
        ];
        for (dx, val, bound_t, lip_t, cvx_t, fd_t) in checks {
            let d = finite(dx(x, &e), "cost derivative", x, &e)?;
            bound_t.see(d.abs(), x, &e);
            let d_near = finite(dx(x + h_lip, &e), "cost derivative", x, &e)?;
            let d_far = finite(dx(y, &e), "cost derivative", y, &e)?;
            let mut lip = (d_near - d).abs() / h_lip;
            if (y - x).abs() > 1e-9 {
                lip = lip.max((d_far - d).abs() / (y - x).abs());
            }
            lip_t.see(lip, x, &e);
            let f0 = finite(val(x, &e), "cost", x, &e)?;
            let fp = val(x + h_lip, &e);
            let fm = val(x - h_lip, &e);
            let mut second = fp - 2.0 * f0 + fm;
            if second.abs() <= 64.0 * f64::EPSILON * (fp.abs() + f0.abs() + fm.abs()) {
                second = 0.0; // rounding noise of an affine cost
            }
            cvx_t.see(second / (h_lip * h_lip), x, &e);
            let fd = (val(x + h_fd, &e) - val(x - h_fd, &e)) / (2.0 * h_fd);
            fd_t.see((fd - d).abs() / d.abs().max(1.0), x, &e);
        }
        if agent.population == Population::Standard {
            let other = Env { factor: -e.factor, ..e };
            let gap = (agent.running_dx(x, &e) - agent.running_dx(x, &other)).abs()
                + (agent.terminal_dx(x, &e) - agent.terminal_dx(x, &other)).abs()
                + (agent.drift.eval(&e) - agent.drift.eval(&other)).abs();
            blind.see(gap, x, &e);
        }
    }
    let mut checks = vec![
        growth.finish(),
        run_bound.finish(),
        term_bound.finish(),
        run_lip.finish(),
        term_lip.finish(),
        run_cvx.finish(),
        term_cvx.finish(),
        run_fd.finish(),
        term_fd.finish(),
    ];
    if agent.population == Population::Standard {
        checks.push(blind.finish());
    }
    Ok(ValidationReport { population: agent.population, checks })
}
