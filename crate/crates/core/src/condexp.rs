//! Bucket estimators of conditional expectations: plain means on tree keys and
//! least-squares regression within keys.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::noise_tree::{Buckets, IntervalBuckets, KeyMode, TransitionKernel};

/// Default minimum number of samples a key needs before its own mean is trusted.
pub const MIN_BUCKET: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStat {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
    /// The value was pooled from neighbouring keys.
    pub pooled: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    shift: f64,
    /// Sums of `v - shift` and its square.
    s1: f64,
    s2: f64,
}

impl Moments {
    fn of(values: &[f64], members: &[usize]) -> Self {
        let shift = members.first().map(|&s| values[s]).unwrap_or(0.0);
        let mut m = Moments { n: members.len() as f64, shift, ..Default::default() };
        for &s in members {
            let d = values[s] - shift;
            m.s1 += d;
            m.s2 += d * d;
        }
        m
    }

    fn mean(&self) -> f64 {
        self.shift + self.s1 / self.n
    }

    fn var(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        ((self.s2 - self.s1 * self.s1 / self.n) / (self.n - 1.0)).max(0.0)
    }
}

/// Weighted pool of bucket moments; a weight multiplies each sample of its bucket.
fn pool(parts: &[(f64, Moments)]) -> (f64, f64) {
    let shift = parts.iter().find(|(w, m)| *w > 0.0 && m.n > 0.0).map(|(_, m)| m.mean()).unwrap_or(0.0);
    let (mut wn, mut w2n, mut ws1, mut ws2) = (0.0, 0.0, 0.0, 0.0);
    for &(w, m) in parts {
        if w <= 0.0 || m.n == 0.0 {
            continue;
        }
        // re-center each bucket's sums on the common shift
        let d = m.shift - shift;
        let s1 = m.s1 + m.n * d;
        let s2 = m.s2 + 2.0 * d * m.s1 + m.n * d * d;
        wn += w * m.n;
        w2n += w * w * m.n;
        ws1 += w * s1;
        ws2 += w * s2;
    }
    let mean_dev = ws1 / wn;
    let var = (ws2 / wn - mean_dev * mean_dev).max(0.0);
    let n_eff = wn * wn / w2n;
    (shift + mean_dev, (var / n_eff).sqrt())
}

/// Per-bucket means of `values` at one interval, pooling undersized keys.
///
/// An undersized key first borrows from keys sharing its current lattice state;
/// if that pool is still too small, it takes the average of every key's mean at
/// the interval weighted by `P(current -> other state)` from the one-step kernel.
pub fn bucket_means(
    buckets: &IntervalBuckets,
    mode: KeyMode,
    kernel: &TransitionKernel,
    values: &[f64],
    min_count: usize,
) -> Vec<BucketStat> {
    let moments: Vec<Moments> = buckets.members.iter().map(|m| Moments::of(values, m)).collect();
    let mut out = Vec::with_capacity(moments.len());
    for (b, key) in buckets.keys.iter().enumerate() {
        let m = moments[b];
        let count = buckets.members[b].len();
        let current = key.current();
        if count >= min_count || current.is_none() {
            out.push(BucketStat { mean: m.mean(), se: (m.var() / m.n).sqrt(), count, pooled: false });
            continue;
        }
        let v = current.unwrap();
        let mut parts = Vec::new();
        if mode == KeyMode::FullPrefix {
            parts = buckets
                .keys
                .iter()
                .zip(&moments)
                .filter(|(k, _)| k.current() == Some(v))
                .map(|(_, m)| (1.0, *m))
                .collect();
        }
        let same_state: f64 = parts.iter().map(|(_, m)| m.n).sum();
        if (same_state as usize) < min_count {
            parts = buckets
                .keys
                .iter()
                .zip(&moments)
                .map(|(k, m)| (kernel.prob(v as usize, k.current().unwrap() as usize) / m.n, *m))
                .collect();
            if parts.iter().all(|(w, m)| *w * m.n <= 0.0) {
                parts.iter_mut().for_each(|p| p.0 = 1.0);
            }
        }
        let (mean, se) = pool(&parts);
        out.push(BucketStat { mean, se, count, pooled: true });
    }
    out
}

/// Exponents of all monomials of total degree `1..=degree` in `k` variables.
pub fn monomials(k: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(k, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
    out
}

/// Fitted regression for one bucket, usable on new points.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub mean: f64,
    /// Features kept after dropping constants: (index, center, scale).
    pub features: Vec<(usize, f64, f64)>,
    pub terms: Vec<Vec<usize>>,
    pub term_center: Vec<f64>,
    pub coef: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    /// Standard error of a fitted value (residual sd times root mean leverage).
    pub se: f64,
    pub reduced: bool,
    /// Borrowed from neighbouring keys because the bucket was undersized.
    pub pooled: bool,
}

impl Fit {
    pub fn constant(mean: f64, se: f64) -> Self {
        Fit {
            mean,
            features: Vec::new(),
            terms: Vec::new(),
            term_center: Vec::new(),
            coef: Vec::new(),
            lo: mean,
            hi: mean,
            se,
            reduced: false,
            pooled: false,
        }
    }

    fn term_values(&self, point: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for t in &self.terms {
            let mut v = 1.0;
            for (j, &e) in t.iter().enumerate() {
                if e > 0 {
                    let (idx, c, s) = self.features[j];
                    v *= ((point[idx] - c) / s).powi(e as i32);
                }
            }
            out.push(v);
        }
    }

    pub fn predict(&self, point: &[f64]) -> f64 {
        if self.coef.is_empty() {
            return self.mean;
        }
        let mut phi = Vec::with_capacity(self.terms.len());
        self.term_values(point, &mut phi);
        let mut y = self.mean;
        for ((p, c), m) in phi.iter().zip(&self.coef).zip(&self.term_center) {
            y += c * (p - m);
        }
        y.clamp(self.lo, self.hi)
    }
}

/// Least squares of `response` on a centred polynomial basis of `features`
/// within one bucket. Fitted values are clamped to the response range, which
/// any conditional expectation respects.
pub fn fit_bucket(members: &[usize], response: &[f64], features: &[&[f64]], degree: usize) -> Fit {
    let n = members.len();
    let nf = n as f64;
    let mom = Moments::of(response, members);
    let mean = mom.mean();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &s in members {
        lo = lo.min(response[s]);
        hi = hi.max(response[s]);
    }
    let mut kept = Vec::new();
    let mut reduced = false;
    for (idx, f) in features.iter().enumerate() {
        let m = Moments::of(f, members);
        let (c, sd) = (m.mean(), m.var().sqrt());
        if sd > 1e-10 * (1.0 + c.abs()) {
            kept.push((idx, c, sd));
        } else if n > 1 {
            reduced = true;
        }
    }
    let terms = if kept.is_empty() { Vec::new() } else { monomials(kept.len(), degree) };
    let p = terms.len();
    if p == 0 || n <= p + 1 {
        let mut fit = Fit::constant(mean, (mom.var() / nf).sqrt());
        fit.lo = lo;
        fit.hi = hi;
        fit.reduced = reduced || p > 0;
        return fit;
    }
    let mut fit = Fit {
        mean,
        features: kept,
        terms,
        term_center: vec![0.0; p],
        coef: Vec::new(),
        lo,
        hi,
        se: 0.0,
        reduced,
        pooled: false,
    };
    let mut phi = Vec::with_capacity(p);
    let mut point = vec![0.0; features.len()];
    let mut rows = Vec::with_capacity(n * p);
    for &s in members {
        for (j, f) in features.iter().enumerate() {
            point[j] = f[s];
        }
        fit.term_values(&point, &mut phi);
        rows.extend_from_slice(&phi);
    }
    for j in 0..p {
        fit.term_center[j] = (0..n).map(|r| rows[r * p + j]).sum::<f64>() / nf;
    }
    for r in 0..n {
        for j in 0..p {
            rows[r * p + j] -= fit.term_center[j];
        }
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (r, &s) in members.iter().enumerate() {
        let row = &rows[r * p..(r + 1) * p];
        let y = response[s] - mean;
        for a in 0..p {
            rhs[a] += row[a] * y;
            for b in 0..=a {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cut = top * 1e-10;
    let mut coef = DVector::<f64>::zeros(p);
    let mut rank = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut && lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            coef += v * (v.dot(&rhs) / lam);
            rank += 1;
        }
    }
    fit.reduced |= rank < p;
    fit.coef = coef.iter().cloned().collect();
    let mut ssr = 0.0;
    for (r, &s) in members.iter().enumerate() {
        let row = &rows[r * p..(r + 1) * p];
        let pred = mean + row.iter().zip(&fit.coef).map(|(a, b)| a * b).sum::<f64>();
        ssr += (response[s] - pred).powi(2);
    }
    let dof = (nf - rank as f64 - 1.0).max(1.0);
    fit.se = (ssr / dof).sqrt() * ((rank as f64 + 1.0) / nf).sqrt();
    fit
}

/// Fits every bucket of an interval; undersized keys get the pooled mean as a constant fit.
pub fn fit_buckets(
    buckets: &Buckets,
    interval: usize,
    kernel: &TransitionKernel,
    response: &[f64],
    features: &[&[f64]],
    degree: usize,
    min_count: usize,
) -> Vec<Fit> {
    let ib = &buckets.intervals[interval];
    let means = bucket_means(ib, buckets.mode, kernel, response, min_count);
    ib.members
        .iter()
        .zip(&means)
        .map(|(members, stat)| {
            if stat.pooled || features.is_empty() {
                let mut fit = Fit::constant(stat.mean, stat.se);
                fit.pooled = stat.pooled;
                fit
            } else {
                fit_bucket(members, response, features, degree)
            }
        })
        .collect()
}
