//! Finite-support approximation of general laws and the approximate inverse
//! built on it.
//!
//! A general law enters as a quantile table. `discretize` truncates to
//! `[-n, n]`, floors onto the `1/n` lattice and shifts the result so its mean
//! equals the declared mean. All three steps act on the table exactly, since
//! the table is piecewise linear in `u`.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::chain::LawAtTime;
use crate::error::{GapError, Result};
use crate::invert::{invert_discrete, CalibrationResult, InvertOptions};
use crate::measure::TargetLaw;
use crate::numeric::compensated_sum;
use crate::simulate::{estimate_ea1, simulate_timechange, TimeChangeOptions};

/// Default knot count for tables built from a quantile function.
pub const DEFAULT_KNOTS: usize = 10_000;

/// Nondecreasing quantile function sampled at increasing levels `u` in
/// `[0, 1]`. Between knots the quantile is linear; outside them it is flat, so
/// the law is supported on `[q_first, q_last]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct QuantileTable {
    u: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    u: Vec<f64>,
    quantile: Vec<f64>,
}

impl TryFrom<RawTable> for QuantileTable {
    type Error = GapError;

    fn try_from(raw: RawTable) -> Result<Self> {
        QuantileTable::new(raw.u, raw.quantile)
    }
}

impl From<QuantileTable> for RawTable {
    fn from(t: QuantileTable) -> Self {
        RawTable { u: t.u, quantile: t.q }
    }
}

#[derive(Deserialize)]
struct CsvRow {
    u: f64,
    quantile: f64,
}

impl QuantileTable {
    pub fn new(u: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let bad = |msg: String| Err(GapError::InvalidQuantileTable(msg));
        if u.len() != q.len() {
            return bad(format!("{} levels but {} quantiles", u.len(), q.len()));
        }
        if u.is_empty() {
            return bad("table is empty".into());
        }
        if u.iter().chain(&q).any(|v| !v.is_finite()) {
            return bad("table entries must be finite".into());
        }
        if u[0] < 0.0 || u[u.len() - 1] > 1.0 {
            return bad("levels must lie in [0, 1]".into());
        }
        if let Some(w) = u.windows(2).find(|w| w[1] <= w[0]) {
            return bad(format!("levels not strictly increasing at u = {}", w[1]));
        }
        if let Some((i, _)) = q.windows(2).enumerate().find(|(_, w)| w[1] < w[0]) {
            return bad(format!("quantiles decrease at u = {}", u[i + 1]));
        }
        Ok(QuantileTable { u, q })
    }

    /// Samples `quantile` at the midpoints `(j + 1/2) / knots`.
    pub fn from_fn(quantile: impl Fn(f64) -> f64, knots: usize) -> Result<Self> {
        if knots == 0 {
            return Err(GapError::InvalidQuantileTable("need at least one knot".into()));
        }
        let u: Vec<f64> = (0..knots).map(|j| (j as f64 + 0.5) / knots as f64).collect();
        let q = u.iter().map(|&v| quantile(v)).collect();
        QuantileTable::new(u, q)
    }

    /// Reads a CSV with header columns `u,quantile`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut u = Vec::new();
        let mut q = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| GapError::Parse(e.to_string()))?;
            u.push(row.u);
            q.push(row.quantile);
        }
        QuantileTable::new(u, q)
    }

    pub fn levels(&self) -> &[f64] {
        &self.u
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.q
    }

    pub fn min(&self) -> f64 {
        self.q[0]
    }

    pub fn max(&self) -> f64 {
        self.q[self.q.len() - 1]
    }

    /// Quantile at level `v`.
    pub fn quantile(&self, v: f64) -> f64 {
        let j = self.u.partition_point(|&x| x <= v);
        if j == 0 {
            return self.q[0];
        }
        if j == self.u.len() {
            return self.max();
        }
        let t = (v - self.u[j - 1]) / (self.u[j] - self.u[j - 1]);
        self.q[j - 1] + t * (self.q[j] - self.q[j - 1])
    }

    /// `P(Y < c)`, the length of `{u : Q(u) < c}`.
    pub fn cdf_below(&self, c: f64) -> f64 {
        let j = self.q.partition_point(|&x| x < c);
        if j == 0 {
            return 0.0;
        }
        if j == self.q.len() {
            return 1.0;
        }
        let (q0, q1) = (self.q[j - 1], self.q[j]);
        self.u[j - 1] + (c - q0) / (q1 - q0) * (self.u[j] - self.u[j - 1])
    }

    /// Pieces `(u_start, u_end, q_start, q_end)` on which the quantile is
    /// linear, covering `[0, 1]`.
    fn pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        let last = self.u.len() - 1;
        let mut out = Vec::with_capacity(self.u.len() + 1);
        if self.u[0] > 0.0 {
            out.push((0.0, self.u[0], self.q[0], self.q[0]));
        }
        for j in 0..last {
            out.push((self.u[j], self.u[j + 1], self.q[j], self.q[j + 1]));
        }
        if self.u[last] < 1.0 {
            out.push((self.u[last], 1.0, self.q[last], self.q[last]));
        }
        out
    }

    pub fn mean(&self) -> f64 {
        compensated_sum(self.pieces().into_iter().map(|(u0, u1, a, b)| 0.5 * (u1 - u0) * (a + b)))
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        compensated_sum(self.pieces().into_iter().map(|(u0, u1, a, b)| {
            let (a, b) = (a - m, b - m);
            (u1 - u0) * (a * a + a * b + b * b) / 3.0
        }))
    }

    pub fn abs_moment(&self) -> f64 {
        compensated_sum(self.pieces().into_iter().map(|(u0, u1, a, b)| (u1 - u0) * mean_abs_linear(a, b)))
    }
}

/// Average of `|a + (b - a) s|` over `s` in `[0, 1]`.
fn mean_abs_linear(a: f64, b: f64) -> f64 {
    if a * b >= 0.0 {
        0.5 * (a + b).abs()
    } else {
        0.5 * (a * a + b * b) / (a - b).abs()
    }
}

/// Where a general law comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawSource {
    Quantiles(QuantileTable),
    Explicit(TargetLaw),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledLaw {
    pub source: LawSource,
    pub declared_mean: f64,
    pub declared_variance: Option<f64>,
}

impl SampledLaw {
    /// Declares the mean and variance of the table itself.
    pub fn from_table(table: QuantileTable) -> Self {
        SampledLaw {
            declared_mean: table.mean(),
            declared_variance: Some(table.variance()),
            source: LawSource::Quantiles(table),
        }
    }

    pub fn from_law(law: TargetLaw) -> Self {
        SampledLaw { declared_mean: law.mean(), declared_variance: Some(law.variance()), source: LawSource::Explicit(law) }
    }

    pub fn with_declared(mut self, mean: f64, variance: Option<f64>) -> Self {
        self.declared_mean = mean;
        self.declared_variance = variance;
        self
    }
}

/// Lattice index of `floor(n * clamp(y, -n, n))`.
fn lattice_index(y: f64, n: usize) -> i64 {
    let nf = n as f64;
    (nf * y.clamp(-nf, nf)).floor() as i64
}

/// Truncates to `[-n, n]`, floors onto the `1/n` lattice and shifts so the
/// mean equals `declared_mean`.
pub fn discretize(mu: &SampledLaw, n: usize) -> Result<TargetLaw> {
    if n == 0 {
        return Err(GapError::InvalidArgument("n must be at least 1".into()));
    }
    if !mu.declared_mean.is_finite() {
        return Err(GapError::UnknownMean);
    }
    let nf = n as f64;
    let top = (n * n) as i64;
    let mut lattice: Vec<(i64, f64)> = Vec::new();
    match &mu.source {
        LawSource::Explicit(law) => {
            for &(y, p) in law.points() {
                let k = lattice_index(y, n);
                match lattice.last_mut() {
                    Some((last, acc)) if *last == k => *acc += p,
                    _ => lattice.push((k, p)),
                }
            }
        }
        LawSource::Quantiles(table) => {
            let lo = lattice_index(table.min(), n);
            let hi = lattice_index(table.max(), n);
            let below = |k: i64| -> f64 {
                if k <= -top {
                    0.0
                } else if k > top {
                    1.0
                } else {
                    table.cdf_below(k as f64 / nf)
                }
            };
            for k in lo..=hi {
                let p = below(k + 1) - below(k);
                if p > 0.0 {
                    lattice.push((k, p));
                }
            }
        }
    }
    let floored_mean = compensated_sum(lattice.iter().map(|&(k, p)| k as f64 / nf * p));
    let total = compensated_sum(lattice.iter().map(|&(_, p)| p));
    let shift = mu.declared_mean - floored_mean / total;
    let points = lattice.into_iter().map(|(k, p)| (k as f64 / nf + shift, p / total)).collect();
    TargetLaw::new(points)
}

/// Wasserstein-1 distance between two finite-support laws, `∫ |F - G| dx`.
pub fn w1_laws(a: &TargetLaw, b: &TargetLaw) -> f64 {
    let mut events: Vec<(f64, f64)> = a
        .points()
        .iter()
        .map(|&(y, p)| (y, p))
        .chain(b.points().iter().map(|&(y, p)| (y, -p)))
        .collect();
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut diff = 0.0;
    let mut terms = Vec::with_capacity(events.len());
    for w in events.windows(2) {
        diff += w[0].1;
        terms.push(diff.abs() * (w[1].0 - w[0].0));
    }
    compensated_sum(terms)
}

/// Wasserstein-1 distance between a finite-support law and a quantile table,
/// `∫₀¹ |Q_law(u) - Q_table(u)| du`.
pub fn w1_to_table(law: &TargetLaw, table: &QuantileTable) -> f64 {
    let mut cuts: Vec<f64> = table.u.clone();
    let mut cum = 0.0;
    for &(_, p) in law.points() {
        cum += p;
        cuts.push(cum.min(1.0));
    }
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let law_q = law_quantiles(law);
    let terms = cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| {
        let mid = 0.5 * (w[0] + w[1]);
        let step = law_q(mid);
        let a = table.quantile(w[0]) - step;
        let b = table.quantile(w[1]) - step;
        (w[1] - w[0]) * mean_abs_linear(a, b)
    });
    compensated_sum(terms)
}

/// Left-continuous quantile function of a finite-support law.
fn law_quantiles(law: &TargetLaw) -> impl Fn(f64) -> f64 + '_ {
    let mut cum = Vec::with_capacity(law.points().len());
    let mut acc = 0.0;
    for &(_, p) in law.points() {
        acc += p;
        cum.push(acc);
    }
    move |v: f64| {
        let j = cum.partition_point(|&c| c < v).min(cum.len() - 1);
        law.points()[j].0
    }
}

/// Distance from an approximation to its source law.
pub fn w1_to_source(law: &TargetLaw, mu: &SampledLaw) -> f64 {
    match &mu.source {
        LawSource::Quantiles(t) => w1_to_table(law, t),
        LawSource::Explicit(l) => w1_laws(law, l),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxOptions {
    pub invert: InvertOptions,
    /// When set and the variance is declared, estimate `E A_1` with this many
    /// time-change paths.
    pub ea1_paths: Option<usize>,
    pub seed: u64,
    pub timechange: TimeChangeOptions,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        ApproxOptions { invert: InvertOptions::default(), ea1_paths: None, seed: 42, timechange: TimeChangeOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ea1Estimate {
    pub mean: f64,
    pub standard_error: f64,
    pub declared_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproxDiagnostics {
    pub n: usize,
    /// W1 between the fitted law and the discretized target.
    pub w1_fit: f64,
    /// W1 between the discretized target and the source law.
    pub w1_source: f64,
    pub target_variance: f64,
    pub ea1: Option<Ea1Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproxResult {
    pub target: TargetLaw,
    pub calibration: CalibrationResult,
    pub diagnostics: ApproxDiagnostics,
}

/// Discretizes `mu` at level `n` and inverts the result.
pub fn approx_invert(mu: &SampledLaw, x0: f64, n: usize, opts: &ApproxOptions) -> Result<ApproxResult> {
    if !mu.declared_mean.is_finite() {
        return Err(GapError::UnknownMean);
    }
    let target = discretize(mu, n)?;
    let calibration = invert_discrete(&target, x0, &opts.invert)?;
    let w1_fit = w1_laws(&law_of(&calibration.fitted)?, &target);
    let ea1 = match (opts.ea1_paths, mu.declared_variance) {
        (Some(paths), Some(var)) => {
            let bundle = simulate_timechange(&calibration.measure, x0, 1.0, paths, opts.seed, &opts.timechange)?;
            let (mean, standard_error) = estimate_ea1(&bundle)?;
            Some(Ea1Estimate { mean, standard_error, declared_variance: var })
        }
        _ => None,
    };
    let diagnostics = ApproxDiagnostics {
        n,
        w1_fit,
        w1_source: w1_to_source(&target, mu),
        target_variance: target.variance(),
        ea1,
    };
    Ok(ApproxResult { target, calibration, diagnostics })
}

/// Drops zero-probability grid points and renormalizes away truncation error.
fn law_of(law: &LawAtTime) -> Result<TargetLaw> {
    let total = compensated_sum(law.probabilities.iter().copied());
    let points = law
        .grid
        .iter()
        .zip(&law.probabilities)
        .filter(|(_, p)| **p > 0.0)
        .map(|(y, p)| (*y, p / total))
        .collect();
    TargetLaw::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform01() -> QuantileTable {
        QuantileTable::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn table_validation() {
        assert!(QuantileTable::new(vec![0.2, 0.1], vec![0.0, 1.0]).is_err());
        assert!(QuantileTable::new(vec![0.1, 0.2], vec![1.0, 0.0]).is_err());
        assert!(QuantileTable::new(vec![0.1], vec![]).is_err());
        assert!(QuantileTable::new(vec![-0.1, 0.2], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn uniform_moments() {
        let t = uniform01();
        assert!((t.mean() - 0.5).abs() < 1e-15);
        assert!((t.variance() - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(t.cdf_below(0.25), 0.25);
        assert_eq!(t.quantile(0.75), 0.75);
    }

    #[test]
    fn abs_moment_handles_sign_change() {
        let t = QuantileTable::new(vec![0.0, 1.0], vec![-1.0, 1.0]).unwrap();
        assert!((t.abs_moment() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lattice_law_is_fixed() {
        let law = TargetLaw::new(vec![(-0.5, 0.25), (0.0, 0.5), (1.5, 0.25)]).unwrap();
        let out = discretize(&SampledLaw::from_law(law.clone()), 2).unwrap();
        assert_eq!(out, law);
    }

    #[test]
    fn single_atom_recentres_to_itself() {
        let mu = SampledLaw::from_law(TargetLaw::dirac(0.5));
        let out = discretize(&mu, 1).unwrap();
        assert_eq!(out.points(), &[(0.5, 1.0)]);
    }

    #[test]
    fn uniform_discretizes_to_equal_cells() {
        let out = discretize(&SampledLaw::from_table(uniform01()), 4).unwrap();
        let ps = out.probabilities();
        assert_eq!(ps.len(), 4);
        for p in ps {
            assert!((p - 0.25).abs() < 1e-15);
        }
        // floor shifts every cell down by 1/8 on average
        assert!((out.positions()[0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn truncation_folds_tails_into_edge_atoms() {
        let t = QuantileTable::new(vec![0.0, 1.0], vec![-3.0, 3.0]).unwrap();
        let out = discretize(&SampledLaw::from_table(t), 1).unwrap();
        let ps = out.probabilities();
        // atoms at -1, 0, 1 before the shift
        assert_eq!(ps.len(), 3);
        assert!((ps[0] - 0.5).abs() < 1e-15);
        assert!((ps[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((ps[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!(out.mean().abs() < 1e-15);
    }

    #[test]
    fn unknown_mean_rejected() {
        let mu = SampledLaw::from_table(uniform01()).with_declared(f64::NAN, None);
        assert_eq!(discretize(&mu, 3), Err(GapError::UnknownMean));
    }

    #[test]
    fn w1_of_shifted_dirac() {
        let a = TargetLaw::dirac(0.0);
        let b = TargetLaw::dirac(0.3);
        assert!((w1_laws(&a, &b) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn w1_table_against_two_point() {
        // uniform on [0,1] vs atoms at 1/4 and 3/4: 4 * ∫_0^{1/4} s ds = 1/8
        let law = TargetLaw::new(vec![(0.25, 0.5), (0.75, 0.5)]).unwrap();
        assert!((w1_to_table(&law, &uniform01()) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn csv_table() {
        let csv = "u,quantile\n0.1,-1\n0.5,0\n0.9,1\n";
        let t = QuantileTable::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(t.levels(), &[0.1, 0.5, 0.9]);
        assert!(matches!(QuantileTable::from_csv("u,quantile\n0.1,x\n".as_bytes()), Err(GapError::Parse(_))));
    }
}
