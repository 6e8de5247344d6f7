//! Run configuration: a TOML file naming a model plus run settings, merged with
//! command-line overrides into one resolved [`RunSpec`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use mfprice_core::market::{InformedScenario, PenaltyScaling};
use mfprice_core::model::{preset, MarketSpec, PRESET_NAMES};
use mfprice_core::noise_tree::{GridSpec, KeyMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Validate,
    Solve,
    Refine,
    Clearing,
    Informed,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Solve => "solve",
            Command::Refine => "refine",
            Command::Clearing => "clearing",
            Command::Informed => "informed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Prefix,
    Markov,
}

impl From<ModeName> for KeyMode {
    fn from(m: ModeName) -> KeyMode {
        match m {
            ModeName::Prefix => KeyMode::FullPrefix,
            ModeName::Markov => KeyMode::Markov,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    command: Option<Command>,
    model: String,
    #[serde(default)]
    grid: GridFile,
    #[serde(default)]
    run: RunFile,
    #[serde(default)]
    solve: SolveFile,
    #[serde(default)]
    validate: ValidateFile,
    #[serde(default)]
    clearing: ClearingFile,
    #[serde(default)]
    refine: RefineFile,
    #[serde(default)]
    informed: InformedFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    n: Option<u32>,
    l: Option<u32>,
    m: Option<usize>,
    horizon: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    seed: Option<u64>,
    samples: Option<usize>,
    damping: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    mode: Option<ModeName>,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveFile {
    paths: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidateFile {
    probes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClearingFile {
    n_values: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    scenarios: Option<usize>,
    cohort: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineFile {
    levels: Option<Vec<u32>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InformedFile {
    n_standard: Option<usize>,
    rho: Option<f64>,
    penalty: Option<PenaltyScaling>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<ModeName>,
    pub damping: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSettings {
    pub seed: u64,
    pub samples: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// `None`: full prefixes up to depth 2, Markov keys beyond.
    pub mode: Option<ModeName>,
    /// Where artifacts go; not echoed into them, so reruns elsewhere compare equal.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearingSettings {
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub scenarios: usize,
    pub cohort: usize,
}

/// Fully resolved run: every default filled in and every range checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSpec {
    pub command: Command,
    /// Preset name or model file as written in the config.
    pub model_source: String,
    pub run: RunSettings,
    pub probes: usize,
    /// Sample paths dumped by `solve`.
    pub dump_paths: usize,
    pub clearing: ClearingSettings,
    pub levels: Vec<u32>,
    pub market: MarketSpec,
}

impl RunSpec {
    pub fn key_mode(&self) -> KeyMode {
        self.run.mode.map(KeyMode::from).unwrap_or_else(|| KeyMode::default_for(&self.market.grid))
    }

    /// The resolved configuration as TOML, echoed into every artifact.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved configuration")
    }
}

/// Reads, merges and validates a configuration file.
pub fn parse_config(path: &Path, command: Command, over: &Overrides) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base, command, over).with_context(|| format!("in config {}", path.display()))
}

/// As [`parse_config`]; relative model paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path, command: Command, over: &Overrides) -> Result<RunSpec> {
    let file: ConfigFile = toml::from_str(text)?;
    if let Some(c) = file.command {
        if c != command {
            bail!("config is for '{}' but the command is '{}'", c.name(), command.name());
        }
    }
    let mut market = load_model(&file.model, base)?;
    let g = &file.grid;
    market.grid = GridSpec {
        n: g.n.unwrap_or(market.grid.n),
        l: g.l.unwrap_or(market.grid.l),
        m: g.m.unwrap_or(market.grid.m),
        horizon: g.horizon.unwrap_or(market.grid.horizon),
    };
    market.grid.check().context("in [grid]")?;
    let i = &file.informed;
    market.scenario = InformedScenario {
        n_standard: i.n_standard.unwrap_or(market.scenario.n_standard),
        rho: i.rho.unwrap_or(market.scenario.rho),
        penalty: i.penalty.unwrap_or(market.scenario.penalty),
    };
    market.scenario.check().context("in [informed]")?;
    market.check().context("in the model")?;

    let r = &file.run;
    let d = market.defaults;
    let run = RunSettings {
        seed: over.seed.or(r.seed).unwrap_or(1),
        samples: over.samples.or(r.samples).unwrap_or(d.samples),
        damping: over.damping.or(r.damping).unwrap_or(d.damping),
        tol: over.tol.or(r.tol).unwrap_or(d.tol),
        max_iter: over.max_iter.or(r.max_iter).unwrap_or(d.max_iter),
        mode: over.mode.or(r.mode),
        out_dir: over.out_dir.clone().or_else(|| r.out_dir.clone()).unwrap_or_else(|| PathBuf::from("mfprice-out")),
    };
    if !(run.damping > 0.0 && run.damping <= 1.0) {
        bail!("run.damping = {} is outside (0, 1]", run.damping);
    }
    if !(run.tol > 0.0 && run.tol.is_finite()) {
        bail!("run.tol = {} must be positive", run.tol);
    }
    if run.max_iter == 0 {
        bail!("run.max_iter must be at least 1");
    }
    if run.samples == 0 {
        bail!("run.samples must be at least 1");
    }

    let probes = file.validate.probes.unwrap_or(2000);
    if probes == 0 {
        bail!("validate.probes must be at least 1");
    }
    let dump_paths = file.solve.paths.unwrap_or(0);
    if dump_paths > run.samples {
        bail!("solve.paths = {dump_paths} exceeds run.samples = {}", run.samples);
    }

    let c = &file.clearing;
    let clearing = ClearingSettings {
        n_values: c.n_values.clone().unwrap_or_else(|| vec![8, 16, 32, 64, 128, 256, 512]),
        seeds: c.seeds.clone().unwrap_or_else(|| (1..=10).collect()),
        scenarios: c.scenarios.unwrap_or(100),
        cohort: c.cohort.unwrap_or(4096),
    };
    check_clearing(&clearing)?;

    let levels = file.refine.levels.clone().unwrap_or_else(|| (1..=market.grid.n).collect());
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] == 0 {
        bail!("refine.levels must be non-empty, strictly increasing and start at 1 or more");
    }
    if command == Command::Refine {
        if levels.len() < 2 {
            bail!("refine.levels needs at least two depths to compare");
        }
        if *levels.last().unwrap() > market.grid.n {
            bail!("refine.levels reaches depth {} but grid.n is {}", levels.last().unwrap(), market.grid.n);
        }
    }
    Ok(RunSpec { command, model_source: file.model, run, probes, dump_paths, clearing, levels, market })
}

fn check_clearing(c: &ClearingSettings) -> Result<()> {
    let n = &c.n_values;
    if n.len() < 4 {
        bail!("clearing.n_values needs at least 4 market sizes, got {}", n.len());
    }
    if n[0] < 2 || n.windows(2).any(|w| w[0] >= w[1]) {
        bail!("clearing.n_values must be strictly increasing and at least 2");
    }
    if n[n.len() - 1] < 4 * n[0] {
        bail!("clearing.n_values must span at least two octaves");
    }
    if c.seeds.is_empty() {
        bail!("clearing.seeds must not be empty");
    }
    if c.scenarios == 0 || c.cohort == 0 {
        bail!("clearing.scenarios and clearing.cohort must be at least 1");
    }
    Ok(())
}

fn load_model(source: &str, base: &Path) -> Result<MarketSpec> {
    if PRESET_NAMES.contains(&source) {
        return Ok(preset(source)?);
    }
    let path = base.join(source);
    if !path.exists() {
        bail!("model '{source}' is neither a preset ({}) nor an existing file", PRESET_NAMES.join(", "));
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading model {}", path.display()))?;
    let spec: MarketSpec = toml::from_str(&text).with_context(|| format!("in model {}", path.display()))?;
    Ok(spec)
}
