//! Executes one command and writes its artifacts plus a manifest.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use mfprice_core::equilibrium::{
    consistency_residual, refinement_study, solve_fixed_point, Context, EquilibriumReport, FixedPointOptions,
};
use mfprice_core::fbsde::SolverOptions;
use mfprice_core::io::fmt_real;
use mfprice_core::market::{informed_inference_check, rate_study, ClearingOptions, ClearingSetup};
use mfprice_core::model::{validate, MarketSpec, ProbeBox};
use mfprice_core::paths::{mix_index, sample_batch, ScenarioBatch};
use serde::Serialize;

use crate::config::{Command, RunSpec};

/// One pass/fail verdict reported by a command.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub checks: Vec<CheckLine>,
    pub dir: PathBuf,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Serialize)]
struct ArtifactEntry {
    file: String,
    content: String,
}

#[derive(Serialize)]
struct CheckEntry {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    seed: u64,
    #[serde(rename = "artifact")]
    artifacts: Vec<ArtifactEntry>,
    #[serde(rename = "check")]
    checks: Vec<CheckEntry>,
    config: &'a RunSpec,
}

struct Artifacts {
    dir: PathBuf,
    header: String,
    written: Vec<ArtifactEntry>,
}

impl Artifacts {
    fn new(spec: &RunSpec) -> Result<Self> {
        let dir = spec.run.out_dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let mut header = format!("# seed={}\n", spec.run.seed);
        for line in spec.to_toml()?.lines() {
            let _ = writeln!(header, "# config: {line}");
        }
        Ok(Artifacts { dir, header, written: Vec::new() })
    }

    fn write(&mut self, file: &str, content: &str, body: &str) -> Result<()> {
        let path = self.dir.join(file);
        std::fs::write(&path, format!("{}{body}", self.header)).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(ArtifactEntry { file: file.into(), content: content.into() });
        Ok(())
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine { name: name.into(), passed, detail }
}

/// Runs the command; the manifest is written even when the run fails part way.
pub fn execute(spec: &RunSpec) -> Result<Outcome> {
    let mut art = Artifacts::new(spec)?;
    let mut checks = Vec::new();
    let result = match spec.command {
        Command::Validate => run_validate(spec, &mut art, &mut checks),
        Command::Solve => run_solve(spec, &mut art, &mut checks),
        Command::Refine => run_refine(spec, &mut art, &mut checks),
        Command::Clearing => run_clearing(spec, &mut art, &mut checks),
        Command::Informed => run_informed(spec, &mut art, &mut checks),
    };
    let manifest = Manifest {
        command: spec.command.name(),
        status: if result.is_ok() { "complete" } else { "partial" },
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        seed: spec.run.seed,
        artifacts: std::mem::take(&mut art.written),
        checks: checks
            .iter()
            .map(|c| CheckEntry { name: c.name.clone(), passed: c.passed, detail: c.detail.clone() })
            .collect(),
        config: spec,
    };
    let text = toml::to_string(&manifest).context("serializing the manifest")?;
    let path = art.dir.join("manifest.txt");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    result?;
    Ok(Outcome { checks, dir: art.dir })
}

fn fixed_point_options(spec: &RunSpec) -> FixedPointOptions {
    FixedPointOptions { damping: spec.run.damping, tol: spec.run.tol, max_iter: spec.run.max_iter }
}

fn batch_for(spec: &RunSpec, market: &MarketSpec, seed: u64) -> Result<ScenarioBatch> {
    Ok(sample_batch(&market.grid, seed, spec.run.samples, &market.factor, market.init_laws())?)
}

fn run_validate(spec: &RunSpec, art: &mut Artifacts, checks: &mut Vec<CheckLine>) -> Result<()> {
    let bounds = spec.market.bounds();
    let region = ProbeBox::for_bounds(&bounds);
    let mut csv = String::from("population,check,worst,limit,passed,location\n");
    for agent in spec.market.agents() {
        let report = validate(agent, &bounds, spec.probes, &region)?;
        for c in &report.checks {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},\"{}\"",
                agent.population.name(),
                c.name,
                fmt_real(c.worst),
                fmt_real(c.limit),
                c.passed,
                c.location
            );
            checks.push(check(
                &format!("{} {}", agent.population.name(), c.name),
                c.passed,
                format!("worst={:.6} limit={:.6}", c.worst, c.limit),
            ));
        }
    }
    art.write("validation.csv", "per-population assumption checks", &csv)?;
    let model = toml::to_string(&spec.market).context("serializing the model")?;
    art.write("model.toml", "resolved model, loadable as a model file", &model)?;
    Ok(())
}

fn iterations_csv(report: &EquilibriumReport) -> String {
    let mut csv = String::from("iteration,residual,sup_theta,sup_image,sup_y_informed,sup_y_standard\n");
    for (k, b) in report.bounds_trace.iter().enumerate() {
        let residual = report.residual_trace.get(k).copied().map(fmt_real).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{residual},{},{},{},{}",
            k + 1,
            fmt_real(b.sup_theta),
            fmt_real(b.sup_image),
            fmt_real(b.sup_y_informed),
            fmt_real(b.sup_y_standard)
        );
    }
    csv
}

/// Convergence, boundedness, time regularity and conditional variation of a solved equilibrium.
fn equilibrium_checks(market: &MarketSpec, report: &EquilibriumReport, checks: &mut Vec<CheckLine>) {
    let l = market.bound;
    let t = market.grid.horizon;
    let c_b = market.bounds().c_b();
    let d = &report.diagnostics;
    let last = report.residual_trace.last().copied().unwrap_or(0.0);
    checks.push(check("converged", report.converged, format!("iterations={} last residual={last:.3e}", report.iterations)));
    let sup = report.bounds_trace.iter().map(|b| b.max()).fold(0.0, f64::max);
    checks.push(check("bounded", sup <= c_b, format!("sup over iterates={sup:.6} bound={c_b}")));
    checks.push(check(
        "time-lipschitz",
        d.time_lipschitz_excess <= 2.0 * l,
        format!("max divided difference={:.6} after noise={:.6} bound={}", d.time_lipschitz_max, d.time_lipschitz_excess, 2.0 * l),
    ));
    let pv = d.cond_variation_price;
    checks.push(check(
        "price variation",
        pv.value <= 2.0 * l * t + 3.0 * pv.se,
        format!("value={:.6} se={:.2e} bound={}", pv.value, pv.se, 2.0 * l * t),
    ));
    for (name, e) in [("informed", d.cond_variation_y_informed), ("standard", d.cond_variation_y_standard)] {
        checks.push(check(
            &format!("{name} adjoint variation"),
            e.value <= t * l + 3.0 * e.se,
            format!("value={:.6} se={:.2e} bound={}", e.value, e.se, t * l),
        ));
    }
}

fn report_text(spec: &RunSpec, report: &EquilibriumReport) -> String {
    let d = &report.diagnostics;
    let mut out = String::new();
    let _ = writeln!(out, "model {} mode {} samples {}", spec.market.name, spec.key_mode().name(), spec.run.samples);
    let _ = writeln!(out, "converged {} after {} iterations", report.converged, report.iterations);
    let _ = writeln!(out, "sup price {}", fmt_real(d.sup_price));
    let _ = writeln!(out, "sup adjoint informed {} standard {}", fmt_real(d.sup_y_informed), fmt_real(d.sup_y_standard));
    let _ = writeln!(out, "time-lipschitz max {} excess {}", fmt_real(d.time_lipschitz_max), fmt_real(d.time_lipschitz_excess));
    for (name, e) in [
        ("price", d.cond_variation_price),
        ("adjoint informed", d.cond_variation_y_informed),
        ("adjoint standard", d.cond_variation_y_standard),
    ] {
        let _ = writeln!(out, "conditional variation {name} {} se {}", fmt_real(e.value), fmt_real(e.se));
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

fn paths_csv(batch: &ScenarioBatch, report: &EquilibriumReport, count: usize) -> String {
    let mut csv = String::from("sample,population,t,x,y,alpha\n");
    for (name, sol) in [("informed", &report.image.informed), ("standard", &report.image.standard)] {
        for s in 0..count {
            for k in sol.start..sol.points {
                let i = s * sol.points + k;
                let _ = writeln!(
                    csv,
                    "{s},{name},{},{},{},{}",
                    fmt_real(batch.fine_grid[k]),
                    fmt_real(sol.x[i]),
                    fmt_real(sol.y[i]),
                    fmt_real(sol.alpha[i])
                );
            }
        }
    }
    csv
}

fn solve_equilibrium(spec: &RunSpec, batch: &ScenarioBatch) -> Result<EquilibriumReport> {
    let ctx = Context::new(batch, &spec.market, spec.key_mode(), SolverOptions::default());
    Ok(solve_fixed_point(&ctx, &fixed_point_options(spec), None)?)
}

fn write_equilibrium(spec: &RunSpec, art: &mut Artifacts, report: &EquilibriumReport) -> Result<()> {
    art.write("equilibrium.csv", "price per interval, key and sub-time", &report.price.to_csv())?;
    art.write("iterations.csv", "fixed-point residual and sup norms per iterate", &iterations_csv(report))?;
    art.write("report.txt", "equilibrium summary", &report_text(spec, report))
}

fn run_solve(spec: &RunSpec, art: &mut Artifacts, checks: &mut Vec<CheckLine>) -> Result<()> {
    let batch = batch_for(spec, &spec.market, spec.run.seed)?;
    let report = solve_equilibrium(spec, &batch)?;
    write_equilibrium(spec, art, &report)?;
    if spec.dump_paths > 0 {
        art.write("paths.csv", "state, adjoint and control of the first samples", &paths_csv(&batch, &report, spec.dump_paths))?;
    }
    let fresh = batch_for(spec, &spec.market, mix_index(&[spec.run.seed, 0xF4E5]))?;
    let rows = consistency_residual(&report.price, &fresh, &spec.market, SolverOptions::default())?;
    let mut csv = String::from("interval,max_abs,max_excess,keys,unmatched\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", r.interval, fmt_real(r.max_abs), fmt_real(r.max_excess), r.keys, r.unmatched);
    }
    art.write("consistency.csv", "price against the map re-evaluated on fresh samples", &csv)?;
    equilibrium_checks(&spec.market, &report, checks);
    Ok(())
}

fn run_refine(spec: &RunSpec, art: &mut Artifacts, checks: &mut Vec<CheckLine>) -> Result<()> {
    let batch = batch_for(spec, &spec.market, spec.run.seed)?;
    let mode = spec.run.mode.map(Into::into);
    let r = refinement_study(&spec.market, &spec.levels, &batch, mode, SolverOptions::default(), &fixed_point_options(spec))?;
    let mut csv = String::from("coarse,fine,median,mean\n");
    for p in &r.pairs {
        let _ = writeln!(csv, "{},{},{},{}", p.coarse, p.fine, fmt_real(p.median), fmt_real(p.mean));
    }
    art.write("refinement.csv", "path distance between neighbouring depths", &csv)?;
    let mut levels = String::from("depth,mode,iterations,converged,sup_price,time_lipschitz_max\n");
    for lv in &r.levels {
        let d = &lv.report.diagnostics;
        let _ = writeln!(
            levels,
            "{},{},{},{},{},{}",
            lv.depth,
            lv.mode.name(),
            lv.report.iterations,
            lv.report.converged,
            fmt_real(d.sup_price),
            fmt_real(d.time_lipschitz_max)
        );
        checks.push(check(&format!("depth {} converged", lv.depth), lv.report.converged, format!("iterations={}", lv.report.iterations)));
    }
    art.write("levels.csv", "per-depth equilibrium summary", &levels)?;
    let medians: Vec<String> = r.pairs.iter().map(|p| format!("{:.4}", p.median)).collect();
    checks.push(check("medians decreasing", r.medians_decreasing(), medians.join(" > ")));
    Ok(())
}

fn run_clearing(spec: &RunSpec, art: &mut Artifacts, checks: &mut Vec<CheckLine>) -> Result<()> {
    let batch = batch_for(spec, &spec.market, spec.run.seed)?;
    let ctx = Context::new(&batch, &spec.market, spec.key_mode(), SolverOptions::default());
    let report = solve_fixed_point(&ctx, &fixed_point_options(spec), None)?;
    write_equilibrium(spec, art, &report)?;
    equilibrium_checks(&spec.market, &report, checks);
    let setup = ClearingSetup::new(&ctx, &report)?;
    let c = &spec.clearing;
    let opts = ClearingOptions { scenarios: c.scenarios, cohort: c.cohort };
    let study = rate_study(&setup, &c.n_values, &c.seeds, &opts)?;
    let summary = study.summary();
    art.write("clearing.csv", "clearing residual per market size", &format!("{}# {summary}\n", study.to_csv()))?;
    checks.push(check("residual within bound", study.within_bounds(), summary.clone()));
    if !study.exact_clearing() {
        let slope = study.slope.unwrap_or(f64::NAN);
        checks.push(check("rate near 1/N", (-1.25..=-0.75).contains(&slope), summary));
    }
    Ok(())
}

fn run_informed(spec: &RunSpec, art: &mut Artifacts, checks: &mut Vec<CheckLine>) -> Result<()> {
    let batch = batch_for(spec, &spec.market, spec.run.seed)?;
    let r = informed_inference_check(
        &spec.market.scenario,
        &spec.market,
        &batch,
        spec.key_mode(),
        SolverOptions::default(),
        &fixed_point_options(spec),
    )?;
    art.write("inference.csv", "informed trade, direct and inferred from the price", &r.to_csv())?;
    write_equilibrium(spec, art, &r.equilibrium)?;
    let tightest = r.rows.iter().map(|row| row.limit).fold(f64::INFINITY, f64::min);
    checks.push(check("inference identity", r.passed, format!("max gap={:.3e} smallest allowed={tightest:.3e}", r.max_gap)));
    Ok(())
}

