use mfprice_core::condexp::MIN_BUCKET;
use mfprice_core::equilibrium::{
    apply_phi, consistency_residual, price_metric, refinement_study, solve_fixed_point, Context, DiscretePrice,
    EquilibriumReport, FixedPointOptions,
};
use mfprice_core::fbsde::{decoupling_probe, gamma_bound, SolverOptions};
use mfprice_core::market::{
    clearing_residual, conditional_covariance, informed_inference_check, rate_study, ClearingOptions, ClearingSetup,
};
use mfprice_core::model::{preset, MarketSpec};
use mfprice_core::noise_tree::KeyMode;
use mfprice_core::paths::{sample_batch, ScenarioBatch};
use mfprice_core::Error;

fn setup(name: &str, samples: usize, seed: u64) -> (MarketSpec, ScenarioBatch) {
    let m = preset(name).unwrap();
    let batch = sample_batch(&m.grid, seed, samples, &m.factor, m.init_laws()).unwrap();
    (m, batch)
}

fn solve(m: &MarketSpec, batch: &ScenarioBatch) -> EquilibriumReport {
    let ctx = Context::new(batch, m, KeyMode::default_for(&m.grid), SolverOptions::default());
    solve_fixed_point(&ctx, &FixedPointOptions::from_defaults(m), None).unwrap()
}

#[test]
fn zero_preset_is_a_one_step_fixed_point() {
    let (m, batch) = setup("zero", 200, 3);
    let r = solve(&m, &batch);
    assert!(r.converged);
    assert_eq!(r.iterations, 1);
    assert_eq!(r.price.sup_abs(), 0.0);
    assert_eq!(r.residual_trace, vec![0.0]);
}

#[test]
fn price_is_the_weighted_key_mean_of_the_integrands() {
    let (m, batch) = setup("single-informed", 6000, 5);
    let ctx = Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default());
    let theta = solve_fixed_point(&ctx, &FixedPointOptions { max_iter: 5, ..FixedPointOptions::from_defaults(&m) }, None)
        .unwrap()
        .price;
    let out = apply_phi(&theta, &ctx).unwrap();
    let w = m.price_weight();
    let share = [m.informed.weight * m.informed.inv_lambda(), m.standard.weight * m.standard.inv_lambda()];
    let p = batch.points();
    let spec = batch.spec;
    let mut checked = 0;
    for (i, level) in ctx.buckets.intervals.iter().enumerate() {
        for (key, members) in level.keys.iter().zip(&level.members) {
            if members.len() < MIN_BUCKET {
                continue;
            }
            let values = out.price.get(key).unwrap();
            let se = out.stderr.get(key).unwrap();
            for (j, &v) in values.iter().enumerate().take(spec.m) {
                let k = i * spec.m + j;
                let mean = |y: &[f64]| members.iter().map(|&s| y[s * p + k]).sum::<f64>() / members.len() as f64;
                let from = |a: &[f64], b: &[f64]| -(share[0] * mean(a) + share[1] * mean(b)) / w;
                let exact = from(&out.informed.bracket, &out.standard.bracket);
                assert!((v - exact).abs() < 1e-12, "interval {i} key {:?} j {j}: {v} vs {exact}", key.states);
                // fitted adjoints are clamped to the bracket range, so their mean only matches within noise
                let adjoint = from(&out.informed.y, &out.standard.y);
                assert!((v - adjoint).abs() <= 3.0 * se[j] + 1e-12, "interval {i} j {j}: {v} vs {adjoint}");
                checked += 1;
            }
        }
    }
    assert!(checked > 20);
}

#[test]
fn deterministic_equilibrium_is_consistent_on_fresh_samples() {
    let (m, batch) = setup("deterministic", 500, 1);
    let r = solve(&m, &batch);
    let fresh = sample_batch(&m.grid, 99, 700, &m.factor, m.init_laws()).unwrap();
    let rows = consistency_residual(&r.price, &fresh, &m, SolverOptions::default()).unwrap();
    assert_eq!(rows.len(), m.grid.intervals());
    for row in rows {
        assert!(row.max_abs < 1e-12, "{row:?}");
    }
}

#[test]
fn stochastic_equilibrium_is_consistent_within_noise() {
    let (m, batch) = setup("single-informed", 8000, 2);
    let r = solve(&m, &batch);
    let fresh = sample_batch(&m.grid, 1234, 8000, &m.factor, m.init_laws()).unwrap();
    let rows = consistency_residual(&r.price, &fresh, &m, SolverOptions::default()).unwrap();
    let worst = rows.iter().map(|r| r.max_abs).fold(0.0, f64::max);
    assert!(worst < 0.1, "{rows:?}");
}

#[test]
fn fixed_point_options_are_checked() {
    let (m, batch) = setup("zero", 50, 1);
    let ctx = Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default());
    for opts in [
        FixedPointOptions { damping: 0.0, tol: 1e-6, max_iter: 5 },
        FixedPointOptions { damping: 1.5, tol: 1e-6, max_iter: 5 },
        FixedPointOptions { damping: 0.5, tol: 0.0, max_iter: 5 },
        FixedPointOptions { damping: 0.5, tol: 1e-6, max_iter: 0 },
    ] {
        assert!(matches!(solve_fixed_point(&ctx, &opts, None), Err(Error::Parameter(_))), "{opts:?}");
    }
}

#[test]
fn prices_on_different_keys_do_not_compare() {
    let (m, batch) = setup("zero", 50, 1);
    let a = DiscretePrice::zeros(&Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default()).buckets);
    let b = DiscretePrice::zeros(&Context::new(&batch, &m, KeyMode::Markov, SolverOptions::default()).buckets);
    assert!(matches!(price_metric(&a, &b), Err(Error::Shape(_))));
}

#[test]
fn decoupling_field_is_continuous_in_the_state() {
    let (m, batch) = setup("general-convex", 400, 8);
    let ctx = Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default());
    let r = solve_fixed_point(&ctx, &FixedPointOptions { max_iter: 3, ..FixedPointOptions::from_defaults(&m) }, None).unwrap();
    let price = r.price.paths(&batch);
    let gamma = gamma_bound(m.grid.horizon, m.bound, m.informed.lambda);
    for agent in m.agents() {
        for delta in [0.5, 0.05, 0.005] {
            let probe = decoupling_probe(agent, &m.bounds(), &price, &batch, &ctx.buckets, &ctx.kernel, &ctx.solver, 4, 0.3, 0.3 + delta).unwrap();
            // |dY| <= Γ |dx|, so the field's jump vanishes with the step
            assert!(probe.ratio.is_finite() && probe.ratio <= gamma, "delta {delta}: {probe:?}");
        }
    }
    let same = decoupling_probe(m.agents()[0], &m.bounds(), &price, &batch, &ctx.buckets, &ctx.kernel, &ctx.solver, 0, 1.0, 1.0);
    assert!(matches!(same, Err(Error::Input(_))));
}

#[test]
fn inference_identity_is_exact_without_noise() {
    for name in ["zero", "deterministic"] {
        let (m, batch) = setup(name, 300, 4);
        let r = informed_inference_check(&m.scenario, &m, &batch, KeyMode::FullPrefix, SolverOptions::default(), &FixedPointOptions::from_defaults(&m)).unwrap();
        assert!(r.passed, "{name}");
        assert!(r.max_gap <= 1e-10, "{name}: {}", r.max_gap);
    }
}

#[test]
fn inference_needs_affine_informed_costs() {
    let (m, batch) = setup("general-convex", 100, 4);
    let r = informed_inference_check(&m.scenario, &m, &batch, KeyMode::FullPrefix, SolverOptions::default(), &FixedPointOptions::from_defaults(&m));
    assert!(matches!(r, Err(Error::Precondition(_))), "{r:?}");
}

#[test]
fn deterministic_market_clears_exactly_at_every_size() {
    let (m, batch) = setup("deterministic", 200, 1);
    let ctx = Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default());
    let r = solve_fixed_point(&ctx, &FixedPointOptions::from_defaults(&m), None).unwrap();
    let s = ClearingSetup::new(&ctx, &r).unwrap();
    let opts = ClearingOptions { scenarios: 4, cohort: 8 };
    for (ni, ns) in [(1, 0), (0, 3), (5, 7)] {
        assert_eq!(clearing_residual(&s, ni, ns, 1, &opts).unwrap().value, 0.0);
    }
    let study = rate_study(&s, &[2, 4, 8, 16], &[1], &opts).unwrap();
    assert!(study.exact_clearing());
    assert!(study.slope.is_none());
    assert_eq!(study.summary(), "slope=undefined exact clearing");
}

#[test]
fn clearing_is_reproducible_and_validates_sizes() {
    let (m, batch) = setup("general-convex", 600, 1);
    let ctx = Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default());
    let r = solve_fixed_point(&ctx, &FixedPointOptions { max_iter: 3, ..FixedPointOptions::from_defaults(&m) }, None).unwrap();
    let s = ClearingSetup::new(&ctx, &r).unwrap();
    let opts = ClearingOptions { scenarios: 6, cohort: 64 };
    let a = clearing_residual(&s, 4, 4, 9, &opts).unwrap();
    let b = clearing_residual(&s, 4, 4, 9, &opts).unwrap();
    assert_eq!(a, b);
    assert!(matches!(clearing_residual(&s, 0, 0, 9, &opts), Err(Error::Input(_))));
    assert!(rate_study(&s, &[8], &[1], &opts).is_err());
    assert!(rate_study(&s, &[8, 16, 16, 64], &[1], &opts).is_err());
    assert!(rate_study(&s, &[8, 9, 10, 11], &[1], &opts).is_err());
    assert!(rate_study(&s, &[8, 16, 32, 64], &[], &opts).is_err());
}

#[test]
fn agents_are_conditionally_uncorrelated_given_the_common_noise() {
    let (m, batch) = setup("general-convex", 600, 1);
    let ctx = Context::new(&batch, &m, KeyMode::FullPrefix, SolverOptions::default());
    let r = solve_fixed_point(&ctx, &FixedPointOptions { max_iter: 3, ..FixedPointOptions::from_defaults(&m) }, None).unwrap();
    let s = ClearingSetup::new(&ctx, &r).unwrap();
    let cov = conditional_covariance(&s, 3, 40, &ClearingOptions { scenarios: 20, cohort: 256 }).unwrap();
    for e in cov {
        assert!(e.value.abs() <= 4.0 * e.se + 1e-6, "{e:?}");
    }
}

#[test]
fn refinement_rejects_bad_levels() {
    let (mut m, _) = setup("terminal-common-noise", 10, 1);
    m.grid.n = 3;
    m.grid.l = 3;
    let batch = sample_batch(&m.grid, 1, 200, &m.factor, m.init_laws()).unwrap();
    let opts = FixedPointOptions::from_defaults(&m);
    for levels in [&[][..], &[2, 1], &[1, 1], &[1, 4]] {
        assert!(refinement_study(&m, levels, &batch, None, SolverOptions::default(), &opts).is_err(), "{levels:?}");
    }
    let r = refinement_study(&m, &[1, 3], &batch, None, SolverOptions::default(), &opts).unwrap();
    assert_eq!(r.levels.len(), 2);
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.levels[1].mode, KeyMode::Markov);
}
