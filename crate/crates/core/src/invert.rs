//! Numerical inversion of the forward map: find interior masses whose gap
//! diffusion has a prescribed finite-support law at time 1.
//!
//! Unknowns are `z_i = log b_i`, so masses stay positive. Points with zero
//! target probability are removed before solving. The endpoints are absorbing
//! and every grid point, endpoints included, enters a least-squares residual on
//! weighted log probabilities. Mass and mean conservation make two of those
//! equations redundant, so an exact solution has zero residual. Solutions need
//! not be unique; the solver returns the first one it reaches.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{forward_law, ForwardOptions, LawAtTime};
use crate::error::{GapError, Result};
use crate::measure::{Atom, SpeedMeasure, TargetLaw};
use crate::numeric::compensated_sum;

/// Allowed mismatch between the target mean and the start point, relative to
/// `max(1, |x0|)`.
pub const MEAN_TOL: f64 = 1e-9;

/// Starting masses for the Newton iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// `b_i = p_i (Δ₋ + Δ₊) / 2`.
    GapWeighted,
    /// `b_i = p_i / (E|X - y_i| - |x0 - y_i|)`: the target mass divided by the
    /// expected local time at `y_i` implied by the target (Tanaka's formula).
    LocalTime,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvertOptions {
    /// Residual tolerance on `‖G(b) - p‖∞`.
    pub tol: f64,
    /// Cap on Newton iterations, homotopy steps included.
    pub max_iter: usize,
    /// Cap on continuation segments.
    pub homotopy_segments: usize,
    /// Central-difference step in log-mass coordinates.
    pub fd_step: f64,
    /// Poisson truncation tolerance of the inner forward solves.
    pub forward_tol: f64,
    pub initial_guess: InitialGuess,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions {
            tol: 1e-9,
            max_iter: 200,
            homotopy_segments: 64,
            fd_step: 1e-5,
            forward_tol: 1e-14,
            initial_guess: InitialGuess::LocalTime,
        }
    }
}

impl InvertOptions {
    pub fn with_tol(tol: f64) -> Self {
        InvertOptions { tol, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub measure: SpeedMeasure,
    /// `‖G(b) - p‖∞` over the target's support points.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual after every Newton iteration, starting with the initial guess.
    pub trace: Vec<f64>,
    /// Law of `X_1` under the returned measure.
    pub fitted: LawAtTime,
}

/// The trimmed inverse problem on a fixed grid.
struct Problem {
    grid: Vec<f64>,
    target: Vec<f64>,
    x0: f64,
    fwd: ForwardOptions,
    bounds: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl Problem {
    fn interior(&self) -> usize {
        self.grid.len() - 2
    }

    fn forward(&self, z: &[f64]) -> Result<LawAtTime> {
        let b: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        forward_law(&b, &self.grid, self.x0, 1.0, &self.fwd)
    }

    /// Residual `w_k (log G_k - log target_k)` over every grid point, the
    /// absorbing endpoints included. Log probabilities keep the system well
    /// scaled when a state is nearly unreachable; the weight
    /// `w_k = p_k / (p_k + LOG_WEIGHT_FLOOR)` stops states whose mass sits at
    /// the forward solver's noise level from steering the step.
    fn residual_against(&self, law: &LawAtTime, target: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.grid.len(),
            (0..self.grid.len())
                .map(|k| self.weights[k] * (law.probabilities[k].max(TINY).ln() - target[k].ln())),
        )
    }

    fn full_residual(&self, law: &LawAtTime, target: &[f64]) -> f64 {
        law.probabilities
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Keeps every exit rate within `[MIN_EXIT_RATE, MAX_EXIT_RATE]`.
    fn clamp(&self, z: &mut [f64]) {
        for (i, zi) in z.iter_mut().enumerate() {
            let (lo, hi) = self.bounds[i];
            *zi = zi.clamp(lo, hi);
        }
    }

    /// Central-difference Jacobian of the weighted log-probabilities in `z`.
    fn jacobian(&self, z: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let n = self.interior();
        let columns: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[i] += h;
                zm[i] -= h;
                let gp = self.forward(&zp)?;
                let gm = self.forward(&zm)?;
                Ok((0..n + 2)
                    .map(|k| {
                        self.weights[k]
                            * (gp.probabilities[k].max(TINY).ln() - gm.probabilities[k].max(TINY).ln())
                            / (2.0 * h)
                    })
                    .collect())
            })
            .collect();
        let mut jac = DMatrix::zeros(n + 2, n);
        for (i, col) in columns.into_iter().enumerate() {
            for (k, v) in col?.into_iter().enumerate() {
                jac[(k, i)] = v;
            }
        }
        Ok(jac)
    }
}

const TINY: f64 = 1e-300;
const LOG_WEIGHT_FLOOR: f64 = 1e-7;
/// Exit-rate window for interior states during the search.
const MAX_EXIT_RATE: f64 = 1e6;
const MIN_EXIT_RATE: f64 = 1e-12;

/// Log-mass bounds that keep each state's exit rate inside the window.
fn log_mass_bounds(grid: &[f64]) -> Vec<(f64, f64)> {
    (1..grid.len() - 1)
        .map(|i| {
            // exit rate = c / b with c = (1/Δ₋ + 1/Δ₊) / 2
            let c = 0.5 * (1.0 / (grid[i] - grid[i - 1]) + 1.0 / (grid[i + 1] - grid[i]));
            ((c / MAX_EXIT_RATE).ln(), (c / MIN_EXIT_RATE).ln())
        })
        .collect()
}

/// Mean-preserving heuristic starting point in log coordinates.
fn initial_point(grid: &[f64], p: &[f64], x0: f64, guess: InitialGuess) -> Vec<f64> {
    let n = grid.len() - 2;
    (1..=n)
        .map(|i| {
            let b = match guess {
                InitialGuess::GapWeighted => p[i] * (grid[i + 1] - grid[i - 1]) / 2.0,
                InitialGuess::LocalTime => {
                    let y = grid[i];
                    let e_abs = compensated_sum(grid.iter().zip(p).map(|(g, q)| q * (g - y).abs()));
                    let local_time = e_abs - (x0 - y).abs();
                    let floor = 1e-3 * p[i] * (grid[i + 1] - grid[i - 1]);
                    p[i] / local_time.max(floor)
                }
            };
            b.ln()
        })
        .collect()
}

/// Masses giving every interior state exit rate 1.
fn unit_rate_point(grid: &[f64]) -> Vec<f64> {
    (1..grid.len() - 1)
        .map(|i| (0.5 * (1.0 / (grid[i] - grid[i - 1]) + 1.0 / (grid[i + 1] - grid[i]))).ln())
        .collect()
}

/// Least-squares Gauss-Newton direction.
fn solve_direction(jac: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = jac.clone().svd(true, true);
    svd.solve(rhs, 1e-12 * svd.singular_values.max()).ok()
}

/// State shared by the plain Newton loop and the continuation.
struct Solver<'a> {
    problem: &'a Problem,
    opts: &'a InvertOptions,
    iterations: usize,
    trace: Vec<f64>,
    best: (f64, Vec<f64>),
}

/// Accepted step: log masses, fitted law, residual.
type Trial = (Vec<f64>, LawAtTime, DVector<f64>);

enum Outcome {
    Reached,
    Stalled,
    Exhausted,
}

const MAX_STEP: f64 = 4.0;

impl Solver<'_> {
    fn record(&mut self, z: &[f64], law: &LawAtTime) {
        let r = self.problem.full_residual(law, &self.problem.target);
        if r < self.best.0 {
            self.best = (r, z.to_vec());
        }
    }

    /// Damped Newton towards `target` until `‖G - target‖∞ ≤ tol` or
    /// stagnation. Each iteration first tries the full Newton step with a
    /// short backtracking search; if that fails it falls back to
    /// Levenberg-Marquardt steps with growing damping.
    fn newton(&mut self, z: &mut Vec<f64>, target: &[f64], tol: f64, budget: usize) -> Result<Outcome> {
        let p = self.problem;
        let mut law = p.forward(z)?;
        let mut res = p.residual_against(&law, target);
        let mut used = 0;
        let mut damping = 0.0_f64;
        loop {
            if p.full_residual(&law, target) <= tol {
                return Ok(Outcome::Reached);
            }
            if used == budget || self.iterations >= self.opts.max_iter {
                return Ok(Outcome::Exhausted);
            }
            let jac = p.jacobian(z, self.opts.fd_step)?;
            let gram = jac.transpose() * &jac;
            let grad = jac.transpose() * &res;
            let scale = gram.diagonal().max().max(1e-300);
            let norm0 = res.norm();

            let try_step = |dir: DVector<f64>, alpha: f64| -> Result<Option<Trial>> {
                let mut dir = dir;
                let largest = dir.amax();
                if largest > MAX_STEP {
                    dir *= MAX_STEP / largest;
                }
                let mut trial: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
                p.clamp(&mut trial);
                let trial_law = p.forward(&trial)?;
                let trial_res = p.residual_against(&trial_law, target);
                Ok((trial_res.norm() < (1.0 - 1e-4 * alpha) * norm0).then_some((trial, trial_law, trial_res)))
            };

            let mut accepted = None;
            if damping == 0.0 {
                if let Some(dir) = solve_direction(&jac, &(-&res)) {
                    for alpha in [1.0, 0.5, 0.25] {
                        if let Some(hit) = try_step(dir.clone(), alpha)? {
                            accepted = Some(hit);
                            break;
                        }
                    }
                }
                if accepted.is_none() {
                    damping = 1e-6 * scale;
                }
            }
            while accepted.is_none() && damping <= 1e8 * scale {
                let mut lhs = gram.clone();
                for i in 0..lhs.nrows() {
                    lhs[(i, i)] += damping * gram[(i, i)].max(1e-12 * scale);
                }
                if let Some(dir) = lhs.lu().solve(&(-&grad)) {
                    accepted = try_step(dir, 1.0)?;
                }
                if accepted.is_none() {
                    damping *= 10.0;
                }
            }
            self.iterations += 1;
            used += 1;
            let Some((trial, trial_law, trial_res)) = accepted else {
                self.trace.push(self.problem.full_residual(&law, &self.problem.target));
                return Ok(Outcome::Stalled);
            };
            damping = if damping < 1e-5 * scale { 0.0 } else { damping / 10.0 };
            *z = trial;
            law = trial_law;
            res = trial_res;
            self.record(z, &law);
            self.trace.push(self.problem.full_residual(&law, &self.problem.target));
            debug!(
                "iteration {}: damping {damping:e}, residual {:e}",
                self.iterations,
                self.trace.last().unwrap()
            );
        }
    }

    /// Continuation from the law of the current iterate to the target.
    fn homotopy(&mut self, z: &mut Vec<f64>) -> Result<bool> {
        let p = self.problem;
        let start = p.forward(z)?.probabilities;
        let mut s = 0.0_f64;
        let mut ds = 0.125_f64;
        let mut segments = 0;
        while s < 1.0 {
            if segments == self.opts.homotopy_segments || self.iterations >= self.opts.max_iter {
                return Ok(false);
            }
            segments += 1;
            let next = (s + ds).min(1.0);
            let target: Vec<f64> = start
                .iter()
                .zip(&p.target)
                .map(|(a, b)| (1.0 - next) * a + next * b)
                .collect();
            let mut trial = z.clone();
            let tol = if next < 1.0 { 1e-4 } else { self.opts.tol };
            match self.newton(&mut trial, &target, tol, 12)? {
                Outcome::Reached => {
                    *z = trial;
                    s = next;
                    ds = (ds * 2.0).min(0.5);
                }
                _ => {
                    ds *= 0.5;
                    if ds < 1e-6 {
                        return Ok(false);
                    }
                }
            }
            debug!("homotopy segment {segments}: s = {s}, ds = {ds}");
        }
        Ok(true)
    }
}

/// Damped Newton in log-mass coordinates with a continuation fallback.
pub fn solve_newton(target: &TargetLaw, x0: f64, opts: &InvertOptions) -> Result<CalibrationResult> {
    invert_discrete(target, x0, opts)
}

/// Finds a speed measure whose gap diffusion started at `x0` has law `target`
/// at time 1. A result with `converged == false` carries the best iterate.
pub fn invert_discrete(target: &TargetLaw, x0: f64, opts: &InvertOptions) -> Result<CalibrationResult> {
    if !(opts.tol > 0.0) {
        return Err(GapError::InvalidArgument(format!("tolerance {} must be positive", opts.tol)));
    }
    if (target.mean() - x0).abs() > MEAN_TOL * x0.abs().max(1.0) || !x0.is_finite() {
        return Err(GapError::MeanMismatch { target_mean: target.mean(), x0 });
    }
    let trimmed = target.trimmed();
    let grid = trimmed.positions();
    let p = trimmed.probabilities();

    if grid.len() == 1 {
        let measure = SpeedMeasure::from_atoms(vec![Atom::infinite(grid[0])])?;
        let fitted = LawAtTime { grid: grid.clone(), probabilities: vec![1.0], time: 1.0, truncation_error_bound: 0.0 };
        return Ok(CalibrationResult { measure, residual: 0.0, iterations: 0, converged: true, trace: vec![0.0], fitted });
    }

    let problem = Problem {
        grid: grid.clone(),
        target: p.clone(),
        x0,
        fwd: ForwardOptions::with_tol(opts.forward_tol),
        bounds: log_mass_bounds(&grid),
        weights: p.iter().map(|q| q / (q + LOG_WEIGHT_FLOOR)).collect(),
    };
    let mut z = initial_point(&grid, &p, x0, opts.initial_guess);
    problem.clamp(&mut z);
    if grid.len() > 2 {
        // A start that leaves some target state practically unreachable gives
        // a flat residual; the unit-rate start never does.
        let unit = unit_rate_point(&grid);
        let score = |z: &[f64]| -> Result<f64> {
            Ok(problem.residual_against(&problem.forward(z)?, &p).norm())
        };
        if score(&unit)? < score(&z)? {
            z = unit;
        }
    }
    let first = problem.forward(&z)?;
    let r0 = problem.full_residual(&first, &p);
    let mut solver = Solver { problem: &problem, opts, iterations: 0, trace: vec![r0], best: (r0, z.clone()) };

    if grid.len() > 2 {
        let mut retries = 0;
        loop {
            match solver.newton(&mut z, &p, opts.tol, usize::MAX)? {
                Outcome::Reached | Outcome::Exhausted => break,
                Outcome::Stalled => {
                    retries += 1;
                    debug!("newton stalled at residual {:e}; continuation attempt {retries}", solver.best.0);
                    z = solver.best.1.clone();
                    if retries > 3 || !solver.homotopy(&mut z)? {
                        z = solver.best.1.clone();
                        if retries > 3 {
                            break;
                        }
                    }
                }
            }
            if solver.iterations >= opts.max_iter {
                break;
            }
        }
    }

    let z_best = solver.best.1.clone();
    let fitted = problem.forward(&z_best)?;
    let residual = problem.full_residual(&fitted, &p);
    let mut atoms = Vec::with_capacity(grid.len());
    atoms.push(Atom::infinite(grid[0]));
    for (y, zi) in grid[1..grid.len() - 1].iter().zip(&z_best) {
        atoms.push(Atom::finite(*y, zi.exp()));
    }
    atoms.push(Atom::infinite(grid[grid.len() - 1]));
    let measure = SpeedMeasure::from_atoms(atoms)?;
    let fitted = spread_onto(&fitted, target);
    Ok(CalibrationResult {
        measure,
        residual,
        iterations: solver.iterations,
        converged: residual <= opts.tol,
        trace: solver.trace,
        fitted,
    })
}

/// Re-expresses a law on the trimmed grid over all points of `target`.
fn spread_onto(law: &LawAtTime, target: &TargetLaw) -> LawAtTime {
    let grid = target.positions();
    let mut probabilities = vec![0.0; grid.len()];
    for (y, p) in law.grid.iter().zip(&law.probabilities) {
        let k = grid.iter().position(|g| g == y).expect("trimmed grid is a subset");
        probabilities[k] = *p;
    }
    LawAtTime { grid, probabilities, ..law.clone() }
}

/// `J[k][i] = ∂p_k / ∂(log b_i)` over the whole grid by central differences.
pub fn jacobian_fd(masses: &[f64], grid: &[f64], x0: f64, h_rel: f64) -> Result<DMatrix<f64>> {
    if !(h_rel > 0.0 && h_rel <= 1e-2) {
        return Err(GapError::InvalidArgument(format!("h_rel {h_rel} outside (0, 1e-2]")));
    }
    if masses.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(GapError::InvalidArgument("masses must be finite and positive".into()));
    }
    let fwd = ForwardOptions::with_tol(1e-14);
    let columns: Vec<Result<Vec<f64>>> = (0..masses.len())
        .into_par_iter()
        .map(|i| {
            let mut up = masses.to_vec();
            let mut down = masses.to_vec();
            up[i] *= h_rel.exp();
            down[i] *= (-h_rel).exp();
            let gp = forward_law(&up, grid, x0, 1.0, &fwd)?;
            let gm = forward_law(&down, grid, x0, 1.0, &fwd)?;
            Ok(gp
                .probabilities
                .iter()
                .zip(&gm.probabilities)
                .map(|(a, b)| (a - b) / (2.0 * h_rel))
                .collect())
        })
        .collect();
    let mut jac = DMatrix::zeros(grid.len(), masses.len());
    for (i, col) in columns.into_iter().enumerate() {
        for (k, v) in col?.into_iter().enumerate() {
            jac[(k, i)] = v;
        }
    }
    Ok(jac)
}
