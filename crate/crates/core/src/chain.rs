//! Birth-death realisation of a gap diffusion on a finite atomic speed measure
//! and its exact transient law via uniformization.
//!
//! Between two neighbouring atoms Brownian motion accumulates local time at
//! `y_i` until it hits `y_{i-1}` or `y_{i+1}`. That local time is exponential
//! with mean `2 Δ₋ Δ₊ / (Δ₋ + Δ₊)`, so the clock `b_i L` gives jump rates
//!
//! ```text
//! up   = 1 / (2 b_i Δ₊)
//! down = 1 / (2 b_i Δ₋)
//! ```
//!
//! which balance `up · Δ₊ = down · Δ₋` (zero drift). With atoms of mass `h`
//! every `h` this reproduces standard Brownian motion as `h → 0`.

use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::measure::{classify_support, initial_split, Atom, Mass, SpeedMeasure};
use crate::numeric::compensated_sum;

/// Normalisation constant of the generator: rates are `RATE_CONVENTION / (b Δ)`.
pub const RATE_CONVENTION: f64 = 0.5;

/// Finite masses below `STIFFNESS_FLOOR × (smallest adjacent gap)` are
/// treated as zero.
pub const STIFFNESS_FLOOR: f64 = 1e-12;

pub const DEFAULT_FORWARD_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Poisson truncation tolerance, in `(0, 1e-3]`.
    pub tol: f64,
    /// Largest Poisson mean `max_rate · t` handled in one sweep.
    pub rate_budget: f64,
    /// Maximum number of time halvings (followed by squarings).
    pub max_halvings: u32,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { tol: DEFAULT_FORWARD_TOL, rate_budget: 1e8, max_halvings: 40 }
    }
}

impl ForwardOptions {
    pub fn with_tol(tol: f64) -> Self {
        ForwardOptions { tol, ..Default::default() }
    }
}

/// Nearest-neighbour continuous-time chain on the atoms of a speed measure.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapChain {
    grid: Vec<f64>,
    rate_up: Vec<f64>,
    rate_down: Vec<f64>,
    absorbing: Vec<bool>,
    initial: Vec<f64>,
    x0: f64,
}

impl GapChain {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn rate_up(&self) -> &[f64] {
        &self.rate_up
    }

    pub fn rate_down(&self) -> &[f64] {
        &self.rate_down
    }

    pub fn absorbing(&self) -> &[bool] {
        &self.absorbing
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        self.rate_up[i] + self.rate_down[i]
    }

    pub fn max_rate(&self) -> f64 {
        (0..self.len()).map(|i| self.exit_rate(i)).fold(0.0, f64::max)
    }

    pub fn initial_mean(&self) -> f64 {
        compensated_sum(self.grid.iter().zip(&self.initial).map(|(y, p)| y * p))
    }
}

/// Drops finite masses that are negligible relative to the local grid scale.
fn apply_stiffness_guard(atoms: &[Atom]) -> Vec<Atom> {
    let n = atoms.len();
    (0..n)
        .filter(|&i| match atoms[i].mass {
            Mass::Infinite => true,
            Mass::Finite(b) => {
                let left = (i > 0).then(|| atoms[i].position - atoms[i - 1].position);
                let right = (i + 1 < n).then(|| atoms[i + 1].position - atoms[i].position);
                let scale = match (left, right) {
                    (Some(l), Some(r)) => l.min(r),
                    (Some(g), None) | (None, Some(g)) => g,
                    (None, None) => return b > 0.0,
                };
                b >= STIFFNESS_FLOOR * scale
            }
        })
        .map(|i| atoms[i])
        .collect()
}

/// Builds the birth-death chain of the gap diffusion started at `x0`.
///
/// Infinite atoms absorb. An outermost atom with finite mass reflects: it only
/// has a rate towards the interior.
pub fn build_chain(nu: &SpeedMeasure, x0: f64) -> Result<GapChain> {
    if !x0.is_finite() {
        return Err(GapError::InvalidArgument(format!("start point {x0} is not finite")));
    }
    if nu.left_tail_diverges() || nu.right_tail_diverges() {
        return Err(GapError::InvalidArgument(
            "forward solves need a purely atomic measure (tail flags set)".into(),
        ));
    }
    if nu.atoms().is_empty() {
        return Err(GapError::EmptyMeasure);
    }
    let atoms = apply_stiffness_guard(nu.atoms());
    if atoms.is_empty() {
        return Err(GapError::EmptyMeasure);
    }
    let first = atoms[0];
    let last = atoms[atoms.len() - 1];
    if first.mass.is_infinite()
        && last.mass.is_infinite()
        && atoms.len() > 1
        && !(first.position <= x0 && x0 <= last.position)
    {
        return Err(GapError::StartOutsideHull { x0, lo: first.position, hi: last.position });
    }

    let n = atoms.len();
    let grid: Vec<f64> = atoms.iter().map(|a| a.position).collect();
    let mut rate_up = vec![0.0; n];
    let mut rate_down = vec![0.0; n];
    let mut absorbing = vec![true; n];
    for (i, atom) in atoms.iter().enumerate() {
        let Mass::Finite(b) = atom.mass else { continue };
        if i + 1 < n {
            rate_up[i] = RATE_CONVENTION / (b * (grid[i + 1] - grid[i]));
        }
        if i > 0 {
            rate_down[i] = RATE_CONVENTION / (b * (grid[i] - grid[i - 1]));
        }
        absorbing[i] = rate_up[i] == 0.0 && rate_down[i] == 0.0;
    }

    let guarded = SpeedMeasure::from_atoms(atoms)?;
    let start = initial_split(&classify_support(&guarded, x0), x0)?;
    let mut initial = vec![0.0; n];
    for &(y, p) in start.points() {
        let idx = grid
            .binary_search_by(|g| g.total_cmp(&y))
            .expect("initial split lands on a grid point");
        initial[idx] = p;
    }
    Ok(GapChain { grid, rate_up, rate_down, absorbing, initial, x0 })
}

/// Law of the chain at a fixed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawAtTime {
    pub grid: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub time: f64,
    /// Bound on the L1 error introduced by Poisson truncation.
    pub truncation_error_bound: f64,
}

impl LawAtTime {
    pub fn mean(&self) -> f64 {
        compensated_sum(self.grid.iter().zip(&self.probabilities).map(|(y, p)| y * p))
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.probabilities.iter().copied())
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        compensated_sum(
            self.grid
                .iter()
                .zip(&self.probabilities)
                .map(|(y, p)| p * (y - m) * (y - m)),
        )
    }
}

/// Poisson(`lambda`) weights from index `offset` up to the right truncation
/// point, normalised over everything that does not underflow.
pub(crate) struct PoissonWeights {
    pub offset: usize,
    pub weights: Vec<f64>,
    /// Probability mass beyond the right truncation point.
    pub tail: f64,
}

impl PoissonWeights {
    pub fn last_index(&self) -> usize {
        self.offset + self.weights.len() - 1
    }
}

pub(crate) fn poisson_weights(lambda: f64, tol: f64) -> PoissonWeights {
    if lambda == 0.0 {
        return PoissonWeights { offset: 0, weights: vec![1.0], tail: 0.0 };
    }
    const NEGLIGIBLE: f64 = 1e-40;
    let mode = lambda.floor() as usize;
    // Relative weights around the mode, r_mode = 1.
    let mut left = Vec::new();
    let mut r = 1.0_f64;
    let mut k = mode;
    while k > 0 {
        r *= k as f64 / lambda;
        if r < NEGLIGIBLE {
            break;
        }
        left.push(r);
        k -= 1;
    }
    let offset = mode - left.len();
    left.reverse();
    let mut right = vec![1.0];
    let mut r = 1.0_f64;
    let mut k = mode;
    loop {
        k += 1;
        r *= lambda / k as f64;
        if r < NEGLIGIBLE {
            break;
        }
        right.push(r);
    }
    let mut weights = left;
    weights.extend(right);
    let total: f64 = compensated_sum(weights.iter().copied());
    for w in &mut weights {
        *w /= total;
    }
    // Drop the right tail while its mass stays below tol.
    let mut tail = 0.0;
    while weights.len() > 1 {
        let w = *weights.last().unwrap();
        if tail + w > tol {
            break;
        }
        tail += w;
        weights.pop();
    }
    PoissonWeights { offset, weights, tail }
}

/// One step of the uniformized kernel applied to a row vector.
fn kernel_step(chain: &GapChain, rate: f64, v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for j in 0..n {
        let mut acc = v[j] * (1.0 - chain.exit_rate(j) / rate);
        if j > 0 {
            acc += v[j - 1] * chain.rate_up[j - 1] / rate;
        }
        if j + 1 < n {
            acc += v[j + 1] * chain.rate_down[j + 1] / rate;
        }
        out[j] = acc;
    }
}

/// `start · exp(t Q)` in one uniformization sweep. Returns the renormalised
/// vector and the Poisson tail mass that was dropped.
fn uniformize(chain: &GapChain, start: &[f64], t: f64, tol: f64) -> (Vec<f64>, f64) {
    let rate = chain.max_rate();
    if t == 0.0 || rate == 0.0 {
        return (start.to_vec(), 0.0);
    }
    let pw = poisson_weights(rate * t, tol);
    let n = start.len();
    let mut v = start.to_vec();
    let mut next = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for k in 0..=pw.last_index() {
        if k >= pw.offset {
            let w = pw.weights[k - pw.offset];
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += w * x;
            }
        }
        if k < pw.last_index() {
            kernel_step(chain, rate, &v, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
    }
    let kept = 1.0 - pw.tail;
    for a in &mut acc {
        *a /= kept;
    }
    (acc, pw.tail)
}

/// Exact law of `X_t` by uniformization with adaptive Poisson truncation.
pub fn law_at(chain: &GapChain, t: f64, opts: &ForwardOptions) -> Result<LawAtTime> {
    if !(opts.tol > 0.0 && opts.tol <= 1e-3) {
        return Err(GapError::InvalidArgument(format!("tol {} outside (0, 1e-3]", opts.tol)));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(GapError::InvalidArgument(format!("time {t} must be finite and nonnegative")));
    }
    let rate = chain.max_rate();
    let lambda = rate * t;
    let (probabilities, bound) = if lambda <= opts.rate_budget {
        let (p, tail) = uniformize(chain, &chain.initial, t, opts.tol);
        (p, 2.0 * tail)
    } else {
        let mut levels = 0u32;
        let mut step = t;
        while rate * step > opts.rate_budget {
            if levels == opts.max_halvings {
                return Err(GapError::RateOverflow { rate, t, levels });
            }
            step /= 2.0;
            levels += 1;
        }
        squared_solve(chain, step, levels, opts.tol)?
    };
    Ok(LawAtTime {
        grid: chain.grid.clone(),
        probabilities,
        time: t,
        truncation_error_bound: bound,
    })
}

/// Transition matrix at `step` by uniformization, squared `levels` times.
fn squared_solve(chain: &GapChain, step: f64, levels: u32, tol: f64) -> Result<(Vec<f64>, f64)> {
    let n = chain.len();
    let per_step_tol = tol / f64::powi(2.0, levels as i32);
    let mut matrix = vec![0.0; n * n];
    let mut worst_tail = 0.0_f64;
    let mut unit = vec![0.0; n];
    for i in 0..n {
        unit.fill(0.0);
        unit[i] = 1.0;
        let (row, tail) = uniformize(chain, &unit, step, per_step_tol);
        matrix[i * n..(i + 1) * n].copy_from_slice(&row);
        worst_tail = worst_tail.max(tail);
    }
    let mut scratch = vec![0.0; n * n];
    for _ in 0..levels {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += matrix[i * n + k] * matrix[k * n + j];
                }
                scratch[i * n + j] = s;
            }
        }
        std::mem::swap(&mut matrix, &mut scratch);
    }
    let mut out = vec![0.0; n];
    for (i, &p) in chain.initial.iter().enumerate() {
        if p != 0.0 {
            for j in 0..n {
                out[j] += p * matrix[i * n + j];
            }
        }
    }
    Ok((out, 2.0 * worst_tail * f64::powi(2.0, levels as i32)))
}

/// The forward map: interior masses on a fixed grid (endpoints carry
/// infinite mass) to the law of `X_t` over the whole grid.
///
/// A zero mass removes its grid point and an infinite mass absorbs; removed
/// points get probability zero in the output.
pub fn forward_law(
    masses: &[f64],
    grid: &[f64],
    x0: f64,
    t: f64,
    opts: &ForwardOptions,
) -> Result<LawAtTime> {
    if grid.len() < 2 {
        return Err(GapError::InvalidArgument("grid needs at least two points".into()));
    }
    if masses.len() + 2 != grid.len() {
        return Err(GapError::InvalidArgument(format!(
            "expected {} interior masses, got {}",
            grid.len() - 2,
            masses.len()
        )));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|y| !y.is_finite()) {
        return Err(GapError::InvalidArgument("grid must be finite and strictly increasing".into()));
    }
    if !(grid[0] < x0 && x0 < grid[grid.len() - 1]) {
        return Err(GapError::StartOutsideHull { x0, lo: grid[0], hi: grid[grid.len() - 1] });
    }
    let mut atoms = Vec::with_capacity(grid.len());
    atoms.push(Atom::infinite(grid[0]));
    for (&y, &b) in grid[1..grid.len() - 1].iter().zip(masses) {
        if b.is_nan() || b < 0.0 {
            return Err(GapError::InvalidArgument(format!("mass {b} at {y} must be in [0, ∞]")));
        }
        atoms.push(Atom::new(y, Mass::from_f64(b)));
    }
    atoms.push(Atom::infinite(grid[grid.len() - 1]));
    let nu = SpeedMeasure::from_atoms(atoms)?;
    let chain = build_chain(&nu, x0)?;
    let law = law_at(&chain, t, opts)?;
    Ok(scatter(&law, grid))
}

/// Spreads a law on a sub-grid onto `grid`, zero elsewhere.
fn scatter(law: &LawAtTime, grid: &[f64]) -> LawAtTime {
    let mut probabilities = vec![0.0; grid.len()];
    let mut j = 0;
    for (y, p) in law.grid.iter().zip(&law.probabilities) {
        while grid[j] != *y {
            j += 1;
        }
        probabilities[j] = *p;
    }
    LawAtTime {
        grid: grid.to_vec(),
        probabilities,
        time: law.time,
        truncation_error_bound: law.truncation_error_bound,
    }
}
