//! Reproducible sampling of the driving noise on the fine grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_real;
use crate::noise_tree::{project_path, GridSpec};

/// Stream tags; a sample's draws for one tag never overlap another tag's.
pub mod tag {
    pub const COMMON: u8 = 1;
    pub const FACTOR: u8 = 2;
    pub const IDIO_INFORMED: u8 = 3;
    pub const IDIO_STANDARD: u8 = 4;
    pub const INIT_INFORMED: u8 = 5;
    pub const INIT_STANDARD: u8 = 6;
    pub const AGENT: u8 = 7;
    pub const AGENT_INIT: u8 = 8;
    pub const PROBE: u8 = 9;
}

/// ChaCha keyed by the seed, with the stream selected by `(index, tag)`.
pub fn stream_rng(seed: u64, index: u64, tag: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | tag as u64);
    rng
}

/// Folds several counters into one stream index (splitmix64 finalizer).
pub fn mix_index(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h >> 8
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// How the correlation enters the informed factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoConvention {
    /// `C = rho B + sqrt(1 - rho^2) B'`
    Rho,
    /// `C = rho^2 B + sqrt(1 - rho^2) B'`
    RhoSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorTransform {
    Identity,
    Scale(f64),
    Tanh,
}

impl FactorTransform {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            FactorTransform::Identity => x,
            FactorTransform::Scale(a) => a * x,
            FactorTransform::Tanh => x.tanh(),
        }
    }
}

/// Informed factor built from the common noise and an independent Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InformedFactorSpec {
    pub rho: f64,
    pub convention: RhoConvention,
    pub transform: FactorTransform,
}

impl InformedFactorSpec {
    pub fn correlated(rho: f64) -> Self {
        InformedFactorSpec { rho, convention: RhoConvention::Rho, transform: FactorTransform::Identity }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::Parameter(format!("factor correlation {} outside [-1, 1]", self.rho)));
        }
        Ok(())
    }

    fn loadings(&self) -> (f64, f64) {
        let a = match self.convention {
            RhoConvention::Rho => self.rho,
            RhoConvention::RhoSquared => self.rho * self.rho,
        };
        (a, (1.0 - self.rho * self.rho).max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitLaw {
    Point(f64),
    Gaussian { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InitLaw {
    pub fn check(&self) -> Result<()> {
        let ok = match *self {
            InitLaw::Point(x) => x.is_finite(),
            InitLaw::Gaussian { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            InitLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid initial-state law {self:?}")))
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            InitLaw::Point(x) => x,
            InitLaw::Gaussian { mean, sd } => mean + sd * normal(rng),
            InitLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Per-sample paths, stored sample-major (`s * points + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    pub spec: GridSpec,
    pub count: usize,
    pub seed: u64,
    pub factor: InformedFactorSpec,
    pub init: [InitLaw; 2],
    pub fine_grid: Arc<Vec<f64>>,
    pub b: Arc<Vec<f64>>,
    pub c: Arc<Vec<f64>>,
    pub w_informed: Arc<Vec<f64>>,
    pub w_standard: Arc<Vec<f64>>,
    pub xi_informed: Arc<Vec<f64>>,
    pub xi_standard: Arc<Vec<f64>>,
    /// Lattice indices of `V_1..V_{2^n-1}` per sample.
    pub node_path: Arc<Vec<Vec<u16>>>,
}

impl ScenarioBatch {
    pub fn points(&self) -> usize {
        self.spec.fine_steps() + 1
    }

    fn row<'a>(&self, data: &'a [f64], s: usize) -> &'a [f64] {
        let p = self.points();
        &data[s * p..(s + 1) * p]
    }

    pub fn b_path(&self, s: usize) -> &[f64] {
        self.row(&self.b, s)
    }

    pub fn c_path(&self, s: usize) -> &[f64] {
        self.row(&self.c, s)
    }

    pub fn w_path(&self, informed: bool, s: usize) -> &[f64] {
        if informed {
            self.row(&self.w_informed, s)
        } else {
            self.row(&self.w_standard, s)
        }
    }

    pub fn xi(&self, informed: bool, s: usize) -> f64 {
        if informed {
            self.xi_informed[s]
        } else {
            self.xi_standard[s]
        }
    }

    /// Node values `V_1..V_{2^n-1}` of sample `s`.
    pub fn node_values(&self, s: usize) -> Vec<f64> {
        let lat = self.spec.lattice();
        self.node_path[s].iter().map(|&i| lat.value(i)).collect()
    }

    /// A coarser tree over the same paths; arrays are shared, not copied.
    pub fn at_level(&self, depth: u32) -> Result<ScenarioBatch> {
        let spec = self.spec.coarsen(depth)?;
        let node_path = Arc::new(discretize_at_level(self, depth)?);
        Ok(ScenarioBatch { spec, node_path, ..self.clone() })
    }
}

fn brownian(rng: &mut ChaCha8Rng, steps: usize, sd: f64, out: &mut Vec<f64>) {
    let mut x = 0.0;
    out.push(x);
    for _ in 0..steps {
        x += sd * normal(rng);
        out.push(x);
    }
}

fn node_indices(spec: &GridSpec, b: &[f64]) -> Result<Vec<u16>> {
    if spec.node_count() == 0 {
        return Ok(Vec::new());
    }
    let raw: Vec<f64> = (1..=spec.node_count()).map(|i| b[i * spec.m]).collect();
    let lat = spec.lattice();
    project_path(&raw, spec.l)?
        .into_iter()
        .map(|v| lat.index_of(v).ok_or_else(|| Error::Data(format!("projection {v} left the lattice"))))
        .collect()
}

pub fn sample_batch(
    spec: &GridSpec,
    seed: u64,
    count: usize,
    factor: &InformedFactorSpec,
    init: [InitLaw; 2],
) -> Result<ScenarioBatch> {
    spec.check()?;
    factor.check()?;
    init[0].check()?;
    init[1].check()?;
    if count == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    let steps = spec.fine_steps();
    let points = steps + 1;
    let sd = spec.dt().sqrt();
    let (load_b, load_perp) = factor.loadings();
    let mut b = Vec::with_capacity(count * points);
    let mut c = Vec::with_capacity(count * points);
    let mut w_i = Vec::with_capacity(count * points);
    let mut w_s = Vec::with_capacity(count * points);
    let mut xi_i = Vec::with_capacity(count);
    let mut xi_s = Vec::with_capacity(count);
    let mut nodes = Vec::with_capacity(count);
    let mut perp = Vec::with_capacity(points);
    for s in 0..count {
        let s64 = s as u64;
        let start = b.len();
        brownian(&mut stream_rng(seed, s64, tag::COMMON), steps, sd, &mut b);
        perp.clear();
        brownian(&mut stream_rng(seed, s64, tag::FACTOR), steps, sd, &mut perp);
        for k in 0..points {
            c.push(factor.transform.apply(load_b * b[start + k] + load_perp * perp[k]));
        }
        brownian(&mut stream_rng(seed, s64, tag::IDIO_INFORMED), steps, sd, &mut w_i);
        brownian(&mut stream_rng(seed, s64, tag::IDIO_STANDARD), steps, sd, &mut w_s);
        xi_i.push(init[0].draw(&mut stream_rng(seed, s64, tag::INIT_INFORMED)));
        xi_s.push(init[1].draw(&mut stream_rng(seed, s64, tag::INIT_STANDARD)));
        nodes.push(node_indices(spec, &b[start..start + points])?);
    }
    Ok(ScenarioBatch {
        spec: *spec,
        count,
        seed,
        factor: *factor,
        init,
        fine_grid: Arc::new(spec.fine_grid()),
        b: Arc::new(b),
        c: Arc::new(c),
        w_informed: Arc::new(w_i),
        w_standard: Arc::new(w_s),
        xi_informed: Arc::new(xi_i),
        xi_standard: Arc::new(xi_s),
        node_path: Arc::new(nodes),
    })
}

/// Node paths of the level-`depth` tree computed from the batch's common-noise paths.
pub fn discretize_at_level(batch: &ScenarioBatch, depth: u32) -> Result<Vec<Vec<u16>>> {
    let coarse = batch.spec.coarsen(depth)?;
    (0..batch.count).map(|s| node_indices(&coarse, batch.b_path(s))).collect()
}

const MAGIC: &[u8; 8] = b"MFPBATCH";
const VERSION: u32 = 1;

/// Writes the batch as: magic, version, `n l m horizon seed count`, factor and
/// initial laws, then each path array time-major (all samples at `t_0`, then `t_1`, ...),
/// the initial states, and the node paths. Little-endian throughout.
pub fn write_batch(batch: &ScenarioBatch, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(batch.spec.n)?;
    w.write_u32::<LittleEndian>(batch.spec.l)?;
    w.write_u64::<LittleEndian>(batch.spec.m as u64)?;
    w.write_f64::<LittleEndian>(batch.spec.horizon)?;
    w.write_u64::<LittleEndian>(batch.seed)?;
    w.write_u64::<LittleEndian>(batch.count as u64)?;
    write_factor(&mut w, &batch.factor)?;
    for law in &batch.init {
        write_law(&mut w, law)?;
    }
    let p = batch.points();
    for data in [&batch.b, &batch.c, &batch.w_informed, &batch.w_standard] {
        for k in 0..p {
            for s in 0..batch.count {
                w.write_f64::<LittleEndian>(data[s * p + k])?;
            }
        }
    }
    for data in [&batch.xi_informed, &batch.xi_standard] {
        for &x in data.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    for i in 0..batch.spec.node_count() {
        for s in 0..batch.count {
            w.write_u16::<LittleEndian>(batch.node_path[s][i])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch(path: &Path) -> Result<ScenarioBatch> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a scenario batch file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported batch version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()?;
    let l = r.read_u32::<LittleEndian>()?;
    let m = r.read_u64::<LittleEndian>()? as usize;
    let horizon = r.read_f64::<LittleEndian>()?;
    let spec = GridSpec::new(n, l, m, horizon)?;
    let seed = r.read_u64::<LittleEndian>()?;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let factor = read_factor(&mut r)?;
    let init = [read_law(&mut r)?, read_law(&mut r)?];
    let p = spec.fine_steps() + 1;
    let mut arrays = Vec::new();
    for _ in 0..4 {
        let mut data = vec![0.0; count * p];
        for k in 0..p {
            for s in 0..count {
                data[s * p + k] = r.read_f64::<LittleEndian>()?;
            }
        }
        arrays.push(Arc::new(data));
    }
    let mut xis = Vec::new();
    for _ in 0..2 {
        let mut v = vec![0.0; count];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        xis.push(Arc::new(v));
    }
    let mut nodes = vec![vec![0u16; spec.node_count()]; count];
    for i in 0..spec.node_count() {
        for row in nodes.iter_mut() {
            row[i] = r.read_u16::<LittleEndian>()?;
        }
    }
    let mut arrays = arrays.into_iter();
    let mut xis = xis.into_iter();
    Ok(ScenarioBatch {
        spec,
        count,
        seed,
        factor,
        init,
        fine_grid: Arc::new(spec.fine_grid()),
        b: arrays.next().unwrap(),
        c: arrays.next().unwrap(),
        w_informed: arrays.next().unwrap(),
        w_standard: arrays.next().unwrap(),
        xi_informed: xis.next().unwrap(),
        xi_standard: xis.next().unwrap(),
        node_path: Arc::new(nodes),
    })
}

fn write_factor(w: &mut impl Write, f: &InformedFactorSpec) -> Result<()> {
    w.write_f64::<LittleEndian>(f.rho)?;
    w.write_u8(match f.convention {
        RhoConvention::Rho => 0,
        RhoConvention::RhoSquared => 1,
    })?;
    let (code, arg) = match f.transform {
        FactorTransform::Identity => (0, 0.0),
        FactorTransform::Scale(a) => (1, a),
        FactorTransform::Tanh => (2, 0.0),
    };
    w.write_u8(code)?;
    w.write_f64::<LittleEndian>(arg)?;
    Ok(())
}

fn read_factor(r: &mut impl Read) -> Result<InformedFactorSpec> {
    let rho = r.read_f64::<LittleEndian>()?;
    let convention = match r.read_u8()? {
        0 => RhoConvention::Rho,
        1 => RhoConvention::RhoSquared,
        x => return Err(Error::Data(format!("unknown rho convention code {x}"))),
    };
    let code = r.read_u8()?;
    let arg = r.read_f64::<LittleEndian>()?;
    let transform = match code {
        0 => FactorTransform::Identity,
        1 => FactorTransform::Scale(arg),
        2 => FactorTransform::Tanh,
        x => return Err(Error::Data(format!("unknown factor transform code {x}"))),
    };
    Ok(InformedFactorSpec { rho, convention, transform })
}

fn write_law(w: &mut impl Write, law: &InitLaw) -> Result<()> {
    let (code, a, b) = match *law {
        InitLaw::Point(x) => (0, x, 0.0),
        InitLaw::Gaussian { mean, sd } => (1, mean, sd),
        InitLaw::Uniform { lo, hi } => (2, lo, hi),
    };
    w.write_u8(code)?;
    w.write_f64::<LittleEndian>(a)?;
    w.write_f64::<LittleEndian>(b)?;
    Ok(())
}

fn read_law(r: &mut impl Read) -> Result<InitLaw> {
    let code = r.read_u8()?;
    let a = r.read_f64::<LittleEndian>()?;
    let b = r.read_f64::<LittleEndian>()?;
    match code {
        0 => Ok(InitLaw::Point(a)),
        1 => Ok(InitLaw::Gaussian { mean: a, sd: b }),
        2 => Ok(InitLaw::Uniform { lo: a, hi: b }),
        x => Err(Error::Data(format!("unknown initial law code {x}"))),
    }
}

/// Per-time mean and variance of every path family, as CSV text.
pub fn summary_csv(batch: &ScenarioBatch) -> String {
    let p = batch.points();
    let n = batch.count as f64;
    let mut out = String::from("t,mean_b,var_b,mean_c,var_c,mean_w_informed,var_w_informed,mean_w_standard,var_w_standard\n");
    for k in 0..p {
        let mut row = vec![fmt_real(batch.fine_grid[k])];
        for data in [&batch.b, &batch.c, &batch.w_informed, &batch.w_standard] {
            let mean = (0..batch.count).map(|s| data[s * p + k]).sum::<f64>() / n;
            let var = (0..batch.count).map(|s| (data[s * p + k] - mean).powi(2)).sum::<f64>() / n;
            row.push(fmt_real(mean));
            row.push(fmt_real(var));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
