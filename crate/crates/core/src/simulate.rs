//! Monte Carlo engines for the gap diffusion.
//!
//! `simulate_jump` runs the birth-death chain exactly. `simulate_timechange`
//! walks a Brownian motion, accumulates the clock `Γ` from occupation-density
//! local times and stops it once `Γ` passes `t`. The two share nothing beyond
//! the speed measure, which is what makes them useful as cross-checks.
//!
//! Every path draws from its own ChaCha8 stream (`seed`, stream = path index),
//! so samples do not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{build_chain, GapChain};
use crate::error::{GapError, Result};
use crate::measure::{Mass, SpeedMeasure};
use crate::numeric::pairwise_sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    JumpChain,
    TimeChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeChangeOptions {
    /// Euler step of the Brownian walk.
    pub step: f64,
    /// Half-width `ε` of the occupation band around each atom.
    pub bandwidth: f64,
    /// Brownian time allowed per attempt; `None` means `1e3 · diameter²`.
    pub time_cap: Option<f64>,
    /// Fresh attempts allowed after a path overruns the cap.
    pub retries: u32,
}

impl Default for TimeChangeOptions {
    fn default() -> Self {
        let step = 1e-5;
        TimeChangeOptions { step, bandwidth: 2.0 * step.sqrt() * 5.0, time_cap: None, retries: 3 }
    }
}

impl TimeChangeOptions {
    pub fn with_step(step: f64, bandwidth: f64) -> Self {
        TimeChangeOptions { step, bandwidth, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub samples_x1: Vec<f64>,
    /// Brownian time `A_t` per path; empty for the jump-chain engine.
    pub samples_a1: Vec<f64>,
    pub seed: u64,
    pub engine: Engine,
    pub n_paths: usize,
    pub t: f64,
    pub step: Option<f64>,
    pub bandwidth: Option<f64>,
    /// Paths restarted after overrunning the Brownian time cap.
    pub resampled: usize,
    /// Largest distance between a stopped Brownian position and the atom it
    /// was snapped to.
    pub max_snap_distance: f64,
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn check_common(x0: f64, t: f64, n_paths: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(GapError::InvalidArgument("n_paths must be at least 1".into()));
    }
    if !x0.is_finite() {
        return Err(GapError::InvalidArgument(format!("x0 = {x0} must be finite")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(GapError::InvalidArgument(format!("time {t} must be finite and nonnegative")));
    }
    Ok(())
}

/// Samples `X_t` by running the birth-death chain: exponential holding times
/// and up-moves with probability `Δ₋ / (Δ₋ + Δ₊)`.
pub fn simulate_jump(nu: &SpeedMeasure, x0: f64, t: f64, n_paths: usize, seed: u64) -> Result<PathBundle> {
    check_common(x0, t, n_paths)?;
    let chain = build_chain(nu, x0)?;
    let samples_x1: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| jump_path(&chain, t, &mut path_rng(seed, i)))
        .collect();
    Ok(PathBundle {
        samples_x1,
        samples_a1: Vec::new(),
        seed,
        engine: Engine::JumpChain,
        n_paths,
        t,
        step: None,
        bandwidth: None,
        resampled: 0,
        max_snap_distance: 0.0,
    })
}

fn jump_path(chain: &GapChain, t: f64, rng: &mut ChaCha8Rng) -> f64 {
    let grid = chain.grid();
    let init = chain.initial();
    let mut state = if init.len() == 1 || init.iter().filter(|p| **p > 0.0).count() == 1 {
        init.iter().position(|p| *p > 0.0).unwrap_or(0)
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = init.len() - 1;
        for (i, p) in init.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    let mut clock = 0.0;
    loop {
        let up = chain.rate_up()[state];
        let down = chain.rate_down()[state];
        let rate = up + down;
        if rate == 0.0 {
            return grid[state];
        }
        let hold: f64 = rng.sample::<f64, _>(Exp1) / rate;
        clock += hold;
        if clock > t {
            return grid[state];
        }
        if rng.gen::<f64>() * rate < up {
            state += 1;
        } else {
            state -= 1;
        }
    }
}

struct Walker<'a> {
    finite: Vec<(f64, f64)>,
    barriers: Vec<f64>,
    atoms: &'a [f64],
    x0: f64,
    t: f64,
    step: f64,
    sqrt_step: f64,
    eps: f64,
    cap: f64,
}

enum Stop {
    Done { x: f64, a: f64, snap: f64 },
    Overran,
}

impl Walker<'_> {
    /// Nearest atom, ties toward `x0`.
    fn snap(&self, b: f64) -> f64 {
        let j = self.atoms.partition_point(|&y| y < b);
        let right = self.atoms.get(j).copied();
        let left = if j > 0 { Some(self.atoms[j - 1]) } else { None };
        match (left, right) {
            (Some(l), Some(r)) => {
                let (dl, dr) = (b - l, r - b);
                if dl < dr {
                    l
                } else if dr < dl {
                    r
                } else if (l - self.x0).abs() <= (r - self.x0).abs() {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!("measure has atoms"),
        }
    }

    /// Barriers enclosing `b`: the last one at or below and the first above.
    fn enclosing(&self, b: f64) -> (f64, f64) {
        let j = self.barriers.partition_point(|&y| y <= b);
        let lo = if j > 0 { self.barriers[j - 1] } else { f64::NEG_INFINITY };
        let hi = self.barriers.get(j).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Stop {
        let mut b = self.x0;
        if self.barriers.contains(&b) {
            return Stop::Done { x: b, a: 0.0, snap: 0.0 };
        }
        let (lo, hi) = self.enclosing(b);
        let bridge_zone = 6.0 * self.sqrt_step;
        let rate = 1.0 / (2.0 * self.eps);
        let mut gamma = 0.0;
        let mut u = 0.0;
        while u < self.cap {
            // Γ grows at the left end of the step: Σ b_i · 1{|B - y_i| < ε} / (2ε)
            let mut dgamma = 0.0;
            let j = self.finite.partition_point(|&(y, _)| y <= b - self.eps);
            for &(y, m) in &self.finite[j..] {
                if y >= b + self.eps {
                    break;
                }
                dgamma += m;
            }
            if dgamma > 0.0 {
                let inc = dgamma * rate * self.step;
                if gamma + inc > self.t {
                    let a = u + self.step * (self.t - gamma) / inc;
                    let x = self.snap(b);
                    return Stop::Done { x, a, snap: (x - b).abs() };
                }
                gamma += inc;
            }
            let z: f64 = rng.sample(StandardNormal);
            let next = b + self.sqrt_step * z;
            u += self.step;
            if next <= lo {
                return Stop::Done { x: lo, a: u, snap: 0.0 };
            }
            if next >= hi {
                return Stop::Done { x: hi, a: u, snap: 0.0 };
            }
            // Brownian-bridge crossing between two monitored points on the
            // same side of a barrier.
            for barrier in [lo, hi] {
                let (d0, d1) = ((b - barrier).abs(), (next - barrier).abs());
                if d0 < bridge_zone && d1 < bridge_zone {
                    let p = (-2.0 * d0 * d1 / self.step).exp();
                    if rng.gen::<f64>() < p {
                        return Stop::Done { x: barrier, a: u, snap: 0.0 };
                    }
                }
            }
            b = next;
        }
        Stop::Overran
    }
}

/// Samples `X_t = B_{A_t}` by time-changing a simulated Brownian motion.
pub fn simulate_timechange(
    nu: &SpeedMeasure,
    x0: f64,
    t: f64,
    n_paths: usize,
    seed: u64,
    opts: &TimeChangeOptions,
) -> Result<PathBundle> {
    check_common(x0, t, n_paths)?;
    if !(opts.step > 0.0 && opts.step.is_finite()) || !(opts.bandwidth > 0.0 && opts.bandwidth.is_finite()) {
        return Err(GapError::InvalidArgument("step and bandwidth must be positive".into()));
    }
    if nu.is_empty() {
        return Err(GapError::EmptyMeasure);
    }
    let atoms: Vec<f64> = nu.positions().collect();
    let lo = atoms[0].min(x0);
    let hi = atoms[atoms.len() - 1].max(x0);
    let diameter = (hi - lo).max(2.0 * opts.bandwidth);
    let cap = opts.time_cap.unwrap_or(1e3 * diameter * diameter);
    let walker = Walker {
        finite: nu.atoms().iter().filter_map(|a| a.mass.finite().map(|m| (a.position, m))).collect(),
        barriers: nu.atoms().iter().filter(|a| a.mass == Mass::Infinite).map(|a| a.position).collect(),
        atoms: &atoms,
        x0,
        t,
        step: opts.step,
        sqrt_step: opts.step.sqrt(),
        eps: opts.bandwidth,
        cap,
    };
    let results: Vec<Result<(f64, f64, f64, usize)>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            for attempt in 0..=opts.retries {
                if let Stop::Done { x, a, snap } = walker.run(&mut rng) {
                    return Ok((x, a, snap, attempt as usize));
                }
            }
            Err(GapError::BudgetExceeded { cap })
        })
        .collect();
    let mut samples_x1 = Vec::with_capacity(n_paths);
    let mut samples_a1 = Vec::with_capacity(n_paths);
    let mut resampled = 0;
    let mut max_snap_distance: f64 = 0.0;
    for r in results {
        let (x, a, snap, retries) = r?;
        samples_x1.push(x);
        samples_a1.push(a);
        resampled += retries;
        max_snap_distance = max_snap_distance.max(snap);
    }
    Ok(PathBundle {
        samples_x1,
        samples_a1,
        seed,
        engine: Engine::TimeChange,
        n_paths,
        t,
        step: Some(opts.step),
        bandwidth: Some(opts.bandwidth),
        resampled,
        max_snap_distance,
    })
}

/// Sample mean and standard error of `A_t`.
pub fn estimate_ea1(bundle: &PathBundle) -> Result<(f64, f64)> {
    if bundle.engine != Engine::TimeChange {
        return Err(GapError::WrongEngine { expected: "time_change" });
    }
    Ok(mean_and_se(&bundle.samples_a1))
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub position: f64,
    pub count: usize,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundleSummary {
    pub engine: Engine,
    pub seed: u64,
    pub n_paths: usize,
    pub t: f64,
    pub step: Option<f64>,
    pub bandwidth: Option<f64>,
    pub histogram: Vec<HistogramBin>,
    pub mean: f64,
    pub standard_error: f64,
    pub ea1: Option<f64>,
    pub ea1_standard_error: Option<f64>,
    pub resampled: usize,
}

/// Frequencies of each distinct sample value, sorted by position.
pub fn histogram(samples: &[f64]) -> Vec<HistogramBin> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut bins: Vec<HistogramBin> = Vec::new();
    for x in sorted {
        match bins.last_mut() {
            Some(bin) if bin.position == x => bin.count += 1,
            _ => bins.push(HistogramBin { position: x, count: 1, frequency: 0.0 }),
        }
    }
    let n = samples.len() as f64;
    for bin in &mut bins {
        bin.frequency = bin.count as f64 / n;
    }
    bins
}

impl PathBundle {
    pub fn summary(&self) -> BundleSummary {
        let (mean, standard_error) = mean_and_se(&self.samples_x1);
        let (ea1, ea1_standard_error) = match estimate_ea1(self) {
            Ok((m, se)) => (Some(m), Some(se)),
            Err(_) => (None, None),
        };
        BundleSummary {
            engine: self.engine,
            seed: self.seed,
            n_paths: self.n_paths,
            t: self.t,
            step: self.step,
            bandwidth: self.bandwidth,
            histogram: histogram(&self.samples_x1),
            mean,
            standard_error,
            ea1,
            ea1_standard_error,
            resampled: self.resampled,
        }
    }

    /// Empirical probabilities on `grid`; samples off the grid are ignored.
    pub fn frequencies_on(&self, grid: &[f64]) -> Vec<f64> {
        let mut counts = vec![0usize; grid.len()];
        for x in &self.samples_x1 {
            if let Ok(k) = grid.binary_search_by(|g| g.total_cmp(x)) {
                counts[k] += 1;
            }
        }
        counts.into_iter().map(|c| c as f64 / self.n_paths as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Atom;

    fn symmetric() -> SpeedMeasure {
        SpeedMeasure::from_atoms(vec![
            Atom::infinite(-1.0),
            Atom::finite(0.0, 1.0 / std::f64::consts::LN_2),
            Atom::infinite(1.0),
        ])
        .unwrap()
    }

    #[test]
    fn constant_process() {
        let nu = SpeedMeasure::from_atoms(vec![Atom::infinite(0.3)]).unwrap();
        let j = simulate_jump(&nu, 0.3, 1.0, 50, 1).unwrap();
        assert!(j.samples_x1.iter().all(|x| *x == 0.3));
        let tc = simulate_timechange(&nu, 0.3, 1.0, 50, 1, &TimeChangeOptions::default()).unwrap();
        assert!(tc.samples_x1.iter().all(|x| *x == 0.3));
        assert_eq!(estimate_ea1(&tc).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn two_point_split() {
        let nu = SpeedMeasure::from_atoms(vec![Atom::infinite(-1.0), Atom::infinite(3.0)]).unwrap();
        let bundle = simulate_jump(&nu, 0.0, 1.0, 20_000, 5).unwrap();
        assert!(bundle.samples_x1.iter().all(|x| *x == -1.0 || *x == 3.0));
        let (mean, se) = mean_and_se(&bundle.samples_x1);
        assert!(mean.abs() < 4.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn jump_chain_centre_mass() {
        let bundle = simulate_jump(&symmetric(), 0.0, 1.0, 100_000, 9).unwrap();
        let p = bundle.frequencies_on(&[-1.0, 0.0, 1.0]);
        let se = (0.25_f64 / 1e5).sqrt();
        assert!((p[1] - 0.5).abs() < 3.0 * se, "{p:?}");
    }

    #[test]
    fn same_seed_same_samples() {
        let a = simulate_jump(&symmetric(), 0.0, 1.0, 1000, 3).unwrap();
        let b = simulate_jump(&symmetric(), 0.0, 1.0, 1000, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_jump(&symmetric(), 0.0, 1.0, 1000, 4).unwrap();
        assert_ne!(a.samples_x1, c.samples_x1);
    }

    #[test]
    fn wrong_engine_rejected() {
        let a = simulate_jump(&symmetric(), 0.0, 1.0, 10, 3).unwrap();
        assert_eq!(estimate_ea1(&a), Err(GapError::WrongEngine { expected: "time_change" }));
    }

    #[test]
    fn timechange_samples_lie_on_atoms() {
        let opts = TimeChangeOptions::with_step(1e-4, 0.05);
        let bundle = simulate_timechange(&symmetric(), 0.0, 1.0, 200, 2, &opts).unwrap();
        assert!(bundle.samples_x1.iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
        assert!(bundle.max_snap_distance <= 0.05);
        assert!(bundle.samples_a1.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn snapping_ties_go_toward_start() {
        let atoms = [0.0, 1.0];
        let w = Walker {
            finite: vec![],
            barriers: vec![],
            atoms: &atoms,
            x0: 0.9,
            t: 1.0,
            step: 1.0,
            sqrt_step: 1.0,
            eps: 0.1,
            cap: 1.0,
        };
        assert_eq!(w.snap(0.5), 1.0);
        assert_eq!(w.snap(0.4), 0.0);
        assert_eq!(w.snap(-3.0), 0.0);
    }

    #[test]
    fn budget_exceeded_reported() {
        let nu = SpeedMeasure::from_atoms(vec![Atom::finite(0.0, 1e-6)]).unwrap();
        let opts = TimeChangeOptions { time_cap: Some(1e-3), retries: 1, ..TimeChangeOptions::with_step(1e-4, 0.01) };
        assert!(matches!(
            simulate_timechange(&nu, 0.0, 1.0, 4, 1, &opts),
            Err(GapError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(h.len(), 2);
        assert_eq!(h[1].count, 3);
        assert_eq!(h[1].frequency, 0.75);
    }
}
