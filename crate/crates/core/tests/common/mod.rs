#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use gapflow_core::{Atom, SpeedMeasure};

/// `n + 2` sorted distinct points drawn uniformly from `(lo, hi)`.
pub fn random_grid(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    loop {
        let mut g: Vec<f64> = (0..n + 2).map(|_| rng.gen_range(lo..hi)).collect();
        g.sort_by(f64::total_cmp);
        if g.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return g;
        }
    }
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.gen_range(lo.log10()..hi.log10()))
}

/// Grid with absorbing endpoints and the given interior masses.
pub fn measure_on(grid: &[f64], masses: &[f64]) -> SpeedMeasure {
    let mut atoms = vec![Atom::infinite(grid[0])];
    atoms.extend(grid[1..grid.len() - 1].iter().zip(masses).map(|(y, b)| Atom::finite(*y, *b)));
    atoms.push(Atom::infinite(grid[grid.len() - 1]));
    SpeedMeasure::from_atoms(atoms).unwrap()
}

pub fn three_atom() -> SpeedMeasure {
    measure_on(&[-1.0, 0.0, 1.0], &[1.0 / std::f64::consts::LN_2])
}

/// Atoms of mass `h` every `h` on `[-6, 6]` with absorbing ends.
pub fn lebesgue_grid(h: f64) -> (Vec<f64>, SpeedMeasure) {
    let n = (12.0 / h).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|k| -6.0 + k as f64 * h).collect();
    let masses = vec![h; n - 1];
    let nu = measure_on(&grid, &masses);
    (grid, nu)
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `½ Σ_k sqrt(p_k (1 - p_k) / n)`: the scale of the total-variation error of
/// an empirical law built from `n` samples.
pub fn tv_standard_error(p: &[f64], n: usize) -> f64 {
    0.5 * p.iter().map(|q| (q * (1.0 - q) / n as f64).sqrt()).sum::<f64>()
}
