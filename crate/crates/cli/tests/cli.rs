use std::path::Path;
use std::process::Command as Proc;

use mfprice_cli::config::{parse_config, parse_config_str, Command, ModeName, Overrides};
use mfprice_core::model::preset;
use mfprice_core::noise_tree::KeyMode;

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_mfprice"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn parse(text: &str, command: Command) -> anyhow::Result<mfprice_cli::config::RunSpec> {
    parse_config_str(text, Path::new("."), command, &Overrides::default())
}

fn error_text(text: &str, command: Command) -> String {
    format!("{:#}", parse(text, command).unwrap_err())
}

#[test]
fn minimal_preset_config_fills_every_default() {
    let spec = parse("model = \"zero\"\n", Command::Solve).unwrap();
    let zero = preset("zero").unwrap();
    assert_eq!(spec.market, zero);
    assert_eq!(spec.run.seed, 1);
    assert_eq!(spec.run.samples, zero.defaults.samples);
    assert_eq!(spec.run.damping, zero.defaults.damping);
    assert_eq!(spec.run.tol, zero.defaults.tol);
    assert_eq!(spec.run.max_iter, zero.defaults.max_iter);
    assert_eq!(spec.run.mode, None);
    assert_eq!(spec.key_mode(), KeyMode::FullPrefix);
    assert_eq!(spec.clearing.n_values, vec![8, 16, 32, 64, 128, 256, 512]);
    assert_eq!(spec.levels, vec![1, 2]);
}

#[test]
fn out_of_range_damping_names_the_key() {
    let msg = error_text("model = \"zero\"\n[run]\ndamping = 1.5\n", Command::Solve);
    assert!(msg.contains("run.damping"), "{msg}");
    assert!(msg.contains("1.5"), "{msg}");
}

#[test]
fn unknown_key_is_rejected_with_its_line() {
    let msg = error_text("model = \"zero\"\n\n[run]\nsed = 3\n", Command::Solve);
    assert!(msg.contains("sed") && msg.contains("line 4"), "{msg}");
    let msg = error_text("model = \"zero\"\ncolour = 1\n", Command::Solve);
    assert!(msg.contains("colour"), "{msg}");
}

#[test]
fn syntax_error_reports_line() {
    let msg = error_text("model = \"zero\"\n[run]\nseed = = 2\n", Command::Solve);
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn other_range_errors() {
    for (text, key) in [
        ("[run]\ntol = 0.0\n", "run.tol"),
        ("[run]\nsamples = 0\n", "run.samples"),
        ("[run]\nmax_iter = 0\n", "run.max_iter"),
        ("[validate]\nprobes = 0\n", "validate.probes"),
        ("[clearing]\nseeds = []\n", "clearing.seeds"),
        ("[informed]\nrho = 1.5\n", "[informed]"),
        ("[grid]\nl = 40\n", "[grid]"),
    ] {
        let msg = error_text(&format!("model = \"zero\"\n{text}"), Command::Solve);
        assert!(msg.contains(key), "{key}: {msg}");
    }
}

#[test]
fn unknown_model_is_rejected() {
    let msg = error_text("model = \"no-such-preset\"\n", Command::Solve);
    assert!(msg.contains("neither a preset"), "{msg}");
}

#[test]
fn command_in_file_must_match() {
    let msg = error_text("command = \"refine\"\nmodel = \"zero\"\n", Command::Solve);
    assert!(msg.contains("refine"), "{msg}");
    assert!(parse("command = \"solve\"\nmodel = \"zero\"\n", Command::Solve).is_ok());
}

#[test]
fn same_file_parses_identically() {
    let dir = tempfile::tempdir().unwrap();
    let text = "model = \"single-informed\"\n[grid]\nm = 2\n[run]\nseed = 9\ntol = 1.234567890123456789e-7\n";
    let path = write(dir.path(), "run.toml", text);
    let a = parse_config(&path, Command::Solve, &Overrides::default()).unwrap();
    let b = parse_config(&path, Command::Solve, &Overrides::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
    assert_eq!(a.run.tol, "1.234567890123456789e-7".parse::<f64>().unwrap());
    assert_eq!(a.market.grid.m, 2);
}

#[test]
fn flags_take_precedence_over_the_file() {
    let over = Overrides {
        seed: Some(5),
        out_dir: Some("elsewhere".into()),
        mode: Some(ModeName::Markov),
        damping: Some(0.25),
        tol: Some(1e-3),
        max_iter: Some(7),
        samples: Some(123),
    };
    let text = "model = \"zero\"\n[run]\nseed = 3\ndamping = 0.5\nmode = \"prefix\"\nsamples = 50\n";
    let spec = parse_config_str(text, Path::new("."), Command::Solve, &over).unwrap();
    assert_eq!(spec.run.seed, 5);
    assert_eq!(spec.run.out_dir, Path::new("elsewhere"));
    assert_eq!(spec.key_mode(), KeyMode::Markov);
    assert_eq!((spec.run.damping, spec.run.tol, spec.run.max_iter, spec.run.samples), (0.25, 1e-3, 7, 123));
}

#[test]
fn refine_levels_must_fit_the_grid() {
    let msg = error_text("model = \"zero\"\n[refine]\nlevels = [1, 2, 3]\n", Command::Refine);
    assert!(msg.contains("grid.n"), "{msg}");
    let msg = error_text("model = \"zero\"\n[refine]\nlevels = [2]\n", Command::Refine);
    assert!(msg.contains("two depths"), "{msg}");
    assert!(parse("model = \"zero\"\n[grid]\nn = 3\n[refine]\nlevels = [1, 2, 3]\n", Command::Refine).is_ok());
}

#[test]
fn clearing_with_one_market_size_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "model = \"deterministic\"\n[clearing]\nn_values = [64]\n");
    let out = bin().args(["clearing", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clearing.n_values"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn solve_on_deterministic_preset_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", "model = \"deterministic\"\n[run]\nseed = 11\n[solve]\npaths = 2\n");
    let out_dir = dir.path().join("out");
    let out = bin().args(["solve", "--config"]).arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["equilibrium.csv", "iterations.csv", "report.txt", "consistency.csv", "paths.csv", "manifest.txt"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out_dir.join("equilibrium.csv")).unwrap();
    assert!(csv.starts_with("# seed=11\n# config: "));
    assert!(csv.contains("# config: model_source = \"deterministic\""));
    // price at time t is -(g0 + c0 (T - t)) = -(0.75 - 0.5 t)
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert!(rows.len() >= 4 * 5);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let t: f64 = f[2].parse().unwrap();
        let p: f64 = f[3].parse().unwrap();
        assert!((p + 0.75 - 0.5 * t).abs() < 1e-12, "{row}");
    }
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = \"complete\""));
    assert!(manifest.contains("seed = 11"));
    assert!(manifest.contains("file = \"equilibrium.csv\""));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS converged"));
}

#[test]
fn failed_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "model = \"single-informed\"\n[run]\nsamples = 500\nmax_iter = 1\n");
    let out = bin().args(["solve", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL converged"));
}

#[test]
fn solver_error_leaves_a_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // inference needs affine informed costs
    let cfg = write(dir.path(), "g.toml", "model = \"general-convex\"\n[run]\nsamples = 200\n");
    let out_dir = dir.path().join("out");
    let out = bin().args(["informed", "--config"]).arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = \"partial\""), "{manifest}");
    assert!(manifest.contains("precondition"), "{manifest}");
}

#[test]
fn identical_runs_give_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "model = \"single-informed\"\n[run]\nsamples = 1500\nseed = 4\n[solve]\npaths = 3\n");
    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = bin().args(["solve", "--config"]).arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
        assert!(matches!(out.status.code(), Some(0 | 1)));
        let mut files: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        listings.push((out_dir, files));
    }
    assert_eq!(listings[0].1, listings[1].1);
    for f in &listings[0].1 {
        let a = std::fs::read(listings[0].0.join(f)).unwrap();
        let b = std::fs::read(listings[1].0.join(f)).unwrap();
        assert!(a == b, "{f:?} differs");
    }
}

#[test]
fn validate_writes_a_reloadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "v.toml", "model = \"general-convex\"\n[grid]\nm = 3\n[validate]\nprobes = 200\n");
    let out_dir = dir.path().join("out");
    let out = bin().args(["validate", "--config"]).arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let original = parse_config(&cfg, Command::Validate, &Overrides::default()).unwrap();
    let reload = write(dir.path(), "r.toml", "model = \"out/model.toml\"\n");
    let reloaded = parse_config(&reload, Command::Validate, &Overrides::default()).unwrap();
    assert_eq!(reloaded.market, original.market);
    let csv = std::fs::read_to_string(out_dir.join("validation.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("population,check,worst,limit,passed,location")));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        // model files have no command line
        let Some(line) = text.lines().find(|l| l.starts_with("command = ")) else { continue };
        let command = match line.trim_start_matches("command = ").trim_matches('"') {
            "validate" => Command::Validate,
            "solve" => Command::Solve,
            "refine" => Command::Refine,
            "clearing" => Command::Clearing,
            "informed" => Command::Informed,
            other => panic!("{other}"),
        };
        parse_config(&path, command, &Overrides::default()).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        seen += 1;
    }
    assert!(seen >= 5);
}
