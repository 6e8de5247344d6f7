//! Dyadic-time, lattice-space discretization of the common Brownian motion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported space resolution; lattice indices must fit in a `u16`.
pub const MAX_RESOLUTION: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Time depth: the horizon is cut into `2^n` intervals.
    pub n: u32,
    /// Space resolution: lattice step `2^-l`, bound `2^l`.
    pub l: u32,
    /// Fine sub-steps per interval.
    pub m: usize,
    pub horizon: f64,
}

impl GridSpec {
    pub fn new(n: u32, l: u32, m: usize, horizon: f64) -> Result<Self> {
        let spec = GridSpec { n, l, m, horizon };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.n < 1 || self.n > 16 {
            return Err(Error::Parameter(format!("time depth n={} outside 1..=16", self.n)));
        }
        if self.l > MAX_RESOLUTION {
            return Err(Error::Parameter(format!(
                "space resolution l={} exceeds {MAX_RESOLUTION}",
                self.l
            )));
        }
        if self.m < 1 {
            return Err(Error::Parameter("sub-steps m must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Parameter(format!("horizon {} must be positive", self.horizon)));
        }
        Ok(())
    }

    pub fn intervals(&self) -> usize {
        1usize << self.n
    }

    /// Length of one tree interval, `T / 2^n`.
    pub fn interval_len(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    pub fn node_time(&self, i: usize) -> f64 {
        i as f64 * self.interval_len()
    }

    pub fn fine_steps(&self) -> usize {
        self.intervals() * self.m
    }

    pub fn dt(&self) -> f64 {
        self.interval_len() / self.m as f64
    }

    /// Fine time `k`; exact at interval endpoints.
    pub fn fine_time(&self, k: usize) -> f64 {
        self.node_time(k / self.m) + (k % self.m) as f64 * self.dt()
    }

    pub fn fine_grid(&self) -> Vec<f64> {
        (0..=self.fine_steps()).map(|k| self.fine_time(k)).collect()
    }

    /// Interval and sub-index of fine point `k`, right-continuous at interval
    /// endpoints except the horizon, which closes the last interval.
    pub fn locate(&self, k: usize) -> (usize, usize) {
        let last = self.intervals() - 1;
        let i = (k / self.m).min(last);
        (i, k - i * self.m)
    }

    /// Number of interior nodes `t_1..t_{2^n-1}` observed by the tree.
    pub fn node_count(&self) -> usize {
        self.intervals() - 1
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.l)
    }

    /// The same fine grid viewed at a coarser depth.
    pub fn coarsen(&self, depth: u32) -> Result<GridSpec> {
        if depth < 1 || depth > self.n {
            return Err(Error::Input(format!(
                "level {depth} is not between 1 and the batch depth {}",
                self.n
            )));
        }
        GridSpec::new(depth, self.l, self.m << (self.n - depth), self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub step: f64,
    pub bound: f64,
    pub points: Vec<f64>,
}

impl Lattice {
    pub fn new(l: u32) -> Self {
        let step = (-(l as f64)).exp2();
        let bound = (l as f64).exp2();
        let count = (1usize << (2 * l + 1)) + 1;
        let points = (0..count).map(|k| -bound + k as f64 * step).collect();
        Lattice { step, bound, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn value(&self, index: u16) -> f64 {
        self.points[index as usize]
    }

    /// Index of a lattice value, or `None` when `v` is off the lattice.
    pub fn index_of(&self, v: f64) -> Option<u16> {
        if !v.is_finite() {
            return None;
        }
        let pos = (v + self.bound) / self.step;
        let k = pos.round();
        if k < 0.0 || k >= self.len() as f64 || self.points[k as usize] != v {
            return None;
        }
        Some(k as u16)
    }
}

/// Lattice projection `x -> 2^-l floor(x 2^l)` with truncation at `±2^l`.
pub fn project_scalar(x: f64, l: u32) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Input(format!("cannot project non-finite value {x}")));
    }
    let bound = (l as f64).exp2();
    if x.abs() <= bound {
        Ok((x * bound).floor() / bound)
    } else {
        Ok(bound * x.signum())
    }
}

/// Running projection of a path: each step projects the previous lattice value
/// plus the raw increment.
pub fn project_path(xs: &[f64], l: u32) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Input("cannot project an empty path".into()));
    }
    let mut out = Vec::with_capacity(xs.len());
    let mut y = project_scalar(xs[0], l)?;
    out.push(y);
    for w in xs.windows(2) {
        y = project_scalar(y + w[1] - w[0], l)?;
        out.push(y);
    }
    Ok(out)
}

/// Law of one projected Brownian step, `P(proj(v + dB) = w)`.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub size: usize,
    /// Row-major, `size x size`.
    pub matrix: Vec<f64>,
}

impl TransitionKernel {
    pub fn row(&self, from: usize) -> &[f64] {
        &self.matrix[from * self.size..(from + 1) * self.size]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.matrix[from * self.size + to]
    }
}

pub fn transition_matrix(spec: &GridSpec) -> TransitionKernel {
    let lat = spec.lattice();
    let sd = spec.interval_len().sqrt();
    let cdf01 = |z: f64| 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let size = lat.len();
    let mut matrix = vec![0.0; size * size];
    for (a, &v) in lat.points.iter().enumerate() {
        // cell k is [edge_k, edge_{k+1}) with the outer edges at infinity
        let cdf = |edge: usize| -> f64 {
            if edge == 0 {
                0.0
            } else if edge == size {
                1.0
            } else {
                cdf01((lat.points[edge] - v) / sd)
            }
        };
        let mut lower = cdf(0);
        for k in 0..size {
            let upper = cdf(k + 1);
            matrix[a * size + k] = (upper - lower).max(0.0);
            lower = upper;
        }
    }
    TransitionKernel { size, matrix }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyMode {
    FullPrefix,
    Markov,
}

impl KeyMode {
    /// Full prefixes for shallow trees, current state beyond depth 2.
    pub fn default_for(spec: &GridSpec) -> KeyMode {
        if spec.n <= 2 {
            KeyMode::FullPrefix
        } else {
            KeyMode::Markov
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KeyMode::FullPrefix => "prefix",
            KeyMode::Markov => "markov",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreeKey {
    pub mode: KeyMode,
    pub interval: usize,
    /// Lattice indices: the whole prefix `V_1..V_i`, or just `V_i` in Markov mode.
    pub states: Vec<u16>,
}

impl TreeKey {
    pub fn new(mode: KeyMode, interval: usize, node_path: &[u16]) -> Self {
        let states = match mode {
            KeyMode::FullPrefix => node_path[..interval].to_vec(),
            KeyMode::Markov if interval == 0 => Vec::new(),
            KeyMode::Markov => vec![node_path[interval - 1]],
        };
        TreeKey { mode, interval, states }
    }

    /// Current lattice state `V_i`; `None` at the root interval.
    pub fn current(&self) -> Option<u16> {
        self.states.last().copied()
    }

    /// Key with the current state dropped (full prefix only).
    pub fn parent_prefix(&self) -> &[u16] {
        match self.states.split_last() {
            Some((_, rest)) => rest,
            None => &[],
        }
    }

    /// Human-readable label: lattice values joined by `|`, or `root`.
    pub fn label(&self, lattice: &Lattice) -> String {
        if self.states.is_empty() {
            return "root".into();
        }
        self.states
            .iter()
            .map(|&s| format!("{}", lattice.value(s)))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Samples grouped by key for one interval.
#[derive(Debug, Clone)]
pub struct IntervalBuckets {
    pub keys: Vec<TreeKey>,
    pub members: Vec<Vec<usize>>,
    /// Bucket id of every sample.
    pub of_sample: Vec<usize>,
}

impl IntervalBuckets {
    pub fn find(&self, key: &TreeKey) -> Option<usize> {
        self.keys.binary_search(key).ok()
    }
}

#[derive(Debug, Clone)]
pub struct Buckets {
    pub mode: KeyMode,
    pub spec: GridSpec,
    pub intervals: Vec<IntervalBuckets>,
}

impl Buckets {
    pub fn sample_count(&self) -> usize {
        self.intervals[0].of_sample.len()
    }

    pub fn key_of(&self, interval: usize, sample: usize) -> &TreeKey {
        let b = &self.intervals[interval];
        &b.keys[b.of_sample[sample]]
    }
}

/// Converts lattice-valued node paths to lattice indices.
pub fn index_paths(node_paths: &[Vec<f64>], spec: &GridSpec) -> Result<Vec<Vec<u16>>> {
    let lat = spec.lattice();
    node_paths
        .iter()
        .enumerate()
        .map(|(s, path)| {
            if path.len() != spec.node_count() {
                return Err(Error::Data(format!(
                    "sample {s}: node path has length {}, expected {}",
                    path.len(),
                    spec.node_count()
                )));
            }
            path.iter()
                .map(|&v| {
                    lat.index_of(v).ok_or_else(|| {
                        Error::Data(format!("sample {s}: value {v} is not on the lattice"))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn bucket_samples(node_paths: &[Vec<f64>], spec: &GridSpec, mode: KeyMode) -> Result<Buckets> {
    let idx = index_paths(node_paths, spec)?;
    Ok(bucket_indexed(&idx, spec, mode))
}

pub fn bucket_indexed(node_paths: &[Vec<u16>], spec: &GridSpec, mode: KeyMode) -> Buckets {
    let intervals = (0..spec.intervals())
        .map(|i| {
            let mut groups: BTreeMap<TreeKey, Vec<usize>> = BTreeMap::new();
            for (s, path) in node_paths.iter().enumerate() {
                groups.entry(TreeKey::new(mode, i, path)).or_default().push(s);
            }
            let mut of_sample = vec![0; node_paths.len()];
            let mut keys = Vec::with_capacity(groups.len());
            let mut members = Vec::with_capacity(groups.len());
            for (b, (key, list)) in groups.into_iter().enumerate() {
                for &s in &list {
                    of_sample[s] = b;
                }
                keys.push(key);
                members.push(list);
            }
            IntervalBuckets { keys, members, of_sample }
        })
        .collect();
    Buckets { mode, spec: *spec, intervals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_scalar(0.0, 3).unwrap(), 0.0);
        assert_eq!(project_scalar(0.7, 1).unwrap(), 0.5);
        assert_eq!(project_scalar(3.2, 1).unwrap(), 2.0);
        assert_eq!(project_scalar(-3.2, 1).unwrap(), -2.0);
        assert_eq!(project_scalar(-0.1, 1).unwrap(), -0.5);
        assert!(project_scalar(f64::NAN, 1).is_err());
    }

    #[test]
    fn path_examples() {
        assert_eq!(project_path(&[0.0, 0.0, 0.0], 2).unwrap(), vec![0.0; 3]);
        assert_eq!(project_path(&[0.7, 0.9], 1).unwrap(), vec![0.5, 0.5]);
        assert!(project_path(&[], 1).is_err());
    }

    #[test]
    fn lattice_shape() {
        for l in 0..4 {
            let lat = Lattice::new(l);
            assert_eq!(lat.len(), (1 << (2 * l + 1)) + 1);
            assert_eq!(lat.points[0], -lat.bound);
            assert_eq!(*lat.points.last().unwrap(), lat.bound);
            for (k, &p) in lat.points.iter().enumerate() {
                assert_eq!(lat.index_of(p), Some(k as u16));
            }
            assert_eq!(lat.index_of(lat.step / 2.0), None);
        }
    }

    #[test]
    fn kernel_unit_variance_center_cell() {
        let spec = GridSpec::new(1, 0, 1, 2.0).unwrap();
        let k = transition_matrix(&spec);
        // lattice {-1, 0, 1}; from 0 the centre cell is [0, 1)
        let expected = 0.341_344_746_068_542_9;
        assert!((k.prob(1, 1) - expected).abs() < 1e-12, "{}", k.prob(1, 1));
        assert!((k.prob(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fine_grid_hits_nodes_exactly() {
        let spec = GridSpec::new(3, 1, 3, 0.7).unwrap();
        for i in 0..=spec.intervals() {
            assert_eq!(spec.fine_time(i * spec.m), i as f64 * (0.7 / 8.0));
        }
        assert_eq!(spec.locate(spec.fine_steps()), (7, 3));
        assert_eq!(spec.locate(3), (1, 0));
    }

    #[test]
    fn markov_keys_merge_prefixes() {
        let spec = GridSpec::new(2, 1, 1, 1.0).unwrap();
        let paths = vec![vec![0.5, 0.0, 1.0], vec![-0.5, 0.0, 1.0]];
        let m = bucket_samples(&paths, &spec, KeyMode::Markov).unwrap();
        assert_eq!(m.intervals[2].keys.len(), 1);
        let p = bucket_samples(&paths, &spec, KeyMode::FullPrefix).unwrap();
        assert_eq!(p.intervals[2].keys.len(), 2);
        assert_eq!(p.intervals[0].keys.len(), 1);
    }

    #[test]
    fn off_lattice_is_data_error() {
        let spec = GridSpec::new(1, 1, 1, 1.0).unwrap();
        let err = bucket_samples(&[vec![0.3]], &spec, KeyMode::FullPrefix).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
