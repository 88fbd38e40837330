//! Fixtures shared by the benchmarks.

use gapflow_core::{Atom, SpeedMeasure, TargetLaw};

/// Atoms of mass `h` every `h` on `[-6, 6]`, absorbing at both ends.
pub fn lebesgue_grid(h: f64) -> SpeedMeasure {
    let n = (12.0 / h).round() as i64;
    let atoms = (0..=n)
        .map(|k| {
            let y = -6.0 + k as f64 * h;
            if k == 0 || k == n {
                Atom::infinite(y)
            } else {
                Atom::finite(y, h)
            }
        })
        .collect();
    SpeedMeasure::from_atoms(atoms).expect("valid grid")
}

/// Seven-point law with mean zero.
pub fn seven_point_target() -> TargetLaw {
    TargetLaw::new(vec![
        (-3.0, 0.05),
        (-2.0, 0.1),
        (-1.0, 0.2),
        (0.0, 0.3),
        (1.0, 0.2),
        (2.0, 0.1),
        (3.0, 0.05),
    ])
    .expect("valid law")
}

/// Symmetric three-atom measure whose centre keeps half the mass at time 1.
pub fn three_atom() -> SpeedMeasure {
    SpeedMeasure::from_atoms(vec![
        Atom::infinite(-1.0),
        Atom::finite(0.0, 1.0 / std::f64::consts::LN_2),
        Atom::infinite(1.0),
    ])
    .expect("valid measure")
}
