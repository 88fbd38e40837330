//! Calibration of a time-homogeneous gap diffusion to call prices at one
//! maturity, with zero interest rates.
//!
//! Discrete derivatives use right (forward) differences. The law implied by
//! the curve puts mass `1 + c'(0+)` at zero and the jumps of `c'` at the
//! interior strikes. If the last price is positive, the remaining mass sits
//! on a single atom past the last strike, placed so that mass and mean are
//! both preserved.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::chain::{build_chain, law_at, ForwardOptions, LawAtTime};
use crate::error::{GapError, Result};
use crate::invert::{invert_discrete, CalibrationResult, InvertOptions};
use crate::measure::{Atom, SpeedMeasure, TargetLaw};
use crate::numeric::compensated_sum;

/// Slack allowed in the no-arbitrage checks.
pub const CURVE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCurve", into = "RawCurve")]
pub struct CallCurve {
    strikes: Vec<f64>,
    prices: Vec<f64>,
    maturity: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCurve {
    strikes: Vec<f64>,
    prices: Vec<f64>,
    maturity: f64,
}

impl TryFrom<RawCurve> for CallCurve {
    type Error = GapError;

    fn try_from(raw: RawCurve) -> Result<Self> {
        CallCurve::new(raw.strikes, raw.prices, raw.maturity)
    }
}

impl From<CallCurve> for RawCurve {
    fn from(c: CallCurve) -> Self {
        RawCurve { strikes: c.strikes, prices: c.prices, maturity: c.maturity }
    }
}

#[derive(Deserialize)]
struct CsvRow {
    strike: f64,
    price: f64,
}

impl CallCurve {
    pub fn new(strikes: Vec<f64>, prices: Vec<f64>, maturity: f64) -> Result<Self> {
        let bad = |msg: String| Err(GapError::InvalidCurve(msg));
        if strikes.len() != prices.len() {
            return bad(format!("{} strikes but {} prices", strikes.len(), prices.len()));
        }
        if strikes.len() < 2 {
            return bad("need at least two strikes".into());
        }
        if strikes.iter().chain(&prices).any(|v| !v.is_finite()) {
            return bad("strikes and prices must be finite".into());
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return bad(format!("maturity {maturity} must be positive"));
        }
        if strikes[0] != 0.0 {
            return bad(format!("first strike must be 0, got {}", strikes[0]));
        }
        if let Some(w) = strikes.windows(2).find(|w| w[1] <= w[0]) {
            return bad(format!("strikes not strictly increasing at {}", w[1]));
        }
        let x0 = prices[0];
        for (k, c) in strikes.iter().zip(&prices) {
            if *c < 0.0 {
                return bad(format!("negative price {c} at strike {k}"));
            }
            if *c < (x0 - k).max(0.0) - CURVE_TOL * x0.max(1.0) {
                return bad(format!("price {c} below intrinsic value at strike {k}"));
            }
        }
        let curve = CallCurve { strikes, prices, maturity };
        let slopes = curve.slopes();
        if slopes[0] < -1.0 - CURVE_TOL {
            return bad(format!("initial slope {} is below -1", slopes[0]));
        }
        if let Some((j, _)) = slopes.iter().enumerate().find(|(_, s)| **s > CURVE_TOL) {
            return bad(format!("prices increase after strike {}", curve.strikes[j]));
        }
        for j in 1..slopes.len() {
            if slopes[j] - slopes[j - 1] < -CURVE_TOL {
                return Err(GapError::ConvexityViolation { strike: curve.strikes[j] });
            }
        }
        let last = curve.prices.len() - 1;
        if curve.prices[last] > 0.0 && slopes[last - 1] >= 0.0 {
            return Err(GapError::NegativeTailMass { price: curve.prices[last] });
        }
        Ok(curve)
    }

    /// Reads a CSV with header columns `strike,price`.
    pub fn from_csv<R: Read>(reader: R, maturity: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut strikes = Vec::new();
        let mut prices = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| GapError::Parse(e.to_string()))?;
            strikes.push(row.strike);
            prices.push(row.price);
        }
        CallCurve::new(strikes, prices, maturity)
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn spot(&self) -> f64 {
        self.prices[0]
    }

    /// Right slopes `(c(K_{j+1}) - c(K_j)) / (K_{j+1} - K_j)`.
    fn slopes(&self) -> Vec<f64> {
        self.strikes
            .windows(2)
            .zip(self.prices.windows(2))
            .map(|(k, c)| (c[1] - c[0]) / (k[1] - k[0]))
            .collect()
    }
}

/// Law of `X_T` implied by the curve.
pub fn implied_law(curve: &CallCurve) -> Result<TargetLaw> {
    let s = curve.slopes();
    let m = curve.strikes.len() - 1;
    let mut points = Vec::with_capacity(m + 2);
    points.push((0.0, 1.0 + s[0]));
    for j in 1..m {
        points.push((curve.strikes[j], s[j] - s[j - 1]));
    }
    let q = -s[m - 1];
    let last_price = curve.prices[m];
    if last_price > 0.0 {
        points.push((curve.strikes[m] + last_price / q, q));
    } else {
        points.push((curve.strikes[m], q));
    }
    // slopes carry rounding error, so masses can leave [0, 1] by a few ulps
    let points: Vec<(f64, f64)> =
        points.into_iter().map(|(y, p)| (y, p.clamp(0.0, 1.0))).filter(|(_, p)| *p > 0.0).collect();
    TargetLaw::new(points)
}

/// Undiscounted call prices `E(X - K)⁺` under `law`.
pub fn reprice(law: &TargetLaw, strikes: &[f64]) -> Vec<f64> {
    strikes
        .iter()
        .map(|k| compensated_sum(law.points().iter().map(|(y, p)| (y - k).max(0.0) * p)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepricingReport {
    pub strikes: Vec<f64>,
    pub market: Vec<f64>,
    pub model: Vec<f64>,
    pub max_abs_error: f64,
    /// `tol · x0`.
    pub tolerance: f64,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CallCalibration {
    pub implied: TargetLaw,
    /// Calibrated measure for horizon `T`; the law it produces at `T` is
    /// `calibration.fitted`.
    pub calibration: CalibrationResult,
    pub maturity: f64,
    pub report: RepricingReport,
}

/// Calibrates at horizon 1, then scales every finite mass by `T`: scaling the
/// measure by `c` runs the same process on a clock slowed by `c`.
pub fn calibrate_calls(curve: &CallCurve, opts: &InvertOptions) -> Result<CallCalibration> {
    let implied = implied_law(curve)?;
    let x0 = curve.spot();
    // A probability error δ moves each price by at most δ · Σ y_i.
    let spread = compensated_sum(implied.positions()).max(x0).max(f64::MIN_POSITIVE);
    let inner = InvertOptions { tol: opts.tol.min(opts.tol * x0 / spread), ..*opts };
    let unit = invert_discrete(&implied, x0, &inner)?;
    let t = curve.maturity;
    let measure = scale_finite(&unit.measure, t)?;
    let fitted = forward_at(&measure, x0, t, &implied, opts.forward_tol)?;
    let model = reprice(&law_from(&fitted)?, &curve.strikes);
    let max_abs_error = model.iter().zip(&curve.prices).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tolerance = opts.tol * x0;
    let report = RepricingReport {
        strikes: curve.strikes.clone(),
        market: curve.prices.clone(),
        model,
        max_abs_error,
        tolerance,
        within_tolerance: max_abs_error <= tolerance,
    };
    let calibration = CalibrationResult { measure, fitted, ..unit };
    Ok(CallCalibration { implied, calibration, maturity: t, report })
}

fn scale_finite(nu: &SpeedMeasure, c: f64) -> Result<SpeedMeasure> {
    let atoms: Vec<Atom> = nu.atoms().iter().map(|a| Atom::new(a.position, a.mass.scaled(c))).collect();
    Ok(SpeedMeasure::from_atoms(atoms)?.with_tails(nu.left_tail_diverges(), nu.right_tail_diverges()))
}

/// Law at time `t` spread over the support of `target`.
fn forward_at(nu: &SpeedMeasure, x0: f64, t: f64, target: &TargetLaw, tol: f64) -> Result<LawAtTime> {
    let law = law_at(&build_chain(nu, x0)?, t, &ForwardOptions::with_tol(tol))?;
    let grid = target.positions();
    let mut probabilities = vec![0.0; grid.len()];
    for (y, p) in law.grid.iter().zip(&law.probabilities) {
        if let Ok(k) = grid.binary_search_by(|g| g.total_cmp(y)) {
            probabilities[k] = *p;
        }
    }
    Ok(LawAtTime { grid, probabilities, ..law })
}

fn law_from(law: &LawAtTime) -> Result<TargetLaw> {
    let total = compensated_sum(law.probabilities.iter().copied());
    TargetLaw::new(law.grid.iter().zip(&law.probabilities).map(|(y, p)| (*y, p / total)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_to_zero(x0: f64) -> CallCurve {
        let strikes = vec![0.0, x0 / 2.0, x0, 1.5 * x0, 2.0 * x0];
        let prices = strikes.iter().map(|k| (x0 * (1.0 - k / (2.0 * x0))).max(0.0)).collect();
        CallCurve::new(strikes, prices, 1.0).unwrap()
    }

    #[test]
    fn intrinsic_curve_gives_dirac() {
        let x0 = 100.0;
        let strikes: Vec<f64> = (0..=8).map(|j| 25.0 * j as f64).collect();
        let prices = strikes.iter().map(|k| (x0 - k).max(0.0)).collect();
        let law = implied_law(&CallCurve::new(strikes, prices, 1.0).unwrap()).unwrap();
        assert_eq!(law.points(), &[(x0, 1.0)]);
    }

    #[test]
    fn linear_curve_gives_two_atoms() {
        let law = implied_law(&linear_to_zero(100.0)).unwrap();
        assert_eq!(law.points(), &[(0.0, 0.5), (200.0, 0.5)]);
        assert_eq!(reprice(&law, &[100.0]), vec![50.0]);
    }

    #[test]
    fn tail_atom_preserves_mean() {
        let curve = CallCurve::new(vec![0.0, 50.0, 100.0], vec![60.0, 20.0, 5.0], 1.0).unwrap();
        let law = implied_law(&curve).unwrap();
        // last slope -0.3, tail atom at 100 + 5 / 0.3
        let (y, p) = *law.points().last().unwrap();
        assert!((y - (100.0 + 5.0 / 0.3)).abs() < 1e-12);
        assert!((p - 0.3).abs() < 1e-15);
        assert!((law.mean() - 60.0).abs() < 1e-10);
    }

    #[test]
    fn curve_validation() {
        let v = |s: Vec<f64>, p: Vec<f64>| CallCurve::new(s, p, 1.0);
        assert!(matches!(v(vec![0.0, 1.0, 2.0], vec![1.0, 0.9, 0.0]), Err(GapError::ConvexityViolation { .. })));
        assert!(matches!(v(vec![0.0, 1.0], vec![1.0, 1.0]), Err(GapError::NegativeTailMass { .. })));
        assert!(matches!(v(vec![1.0, 2.0], vec![1.0, 0.5]), Err(GapError::InvalidCurve(_))));
        assert!(matches!(v(vec![0.0, 1.0], vec![2.0, 0.5]), Err(GapError::InvalidCurve(_))));
        assert!(CallCurve::new(vec![0.0, 1.0], vec![1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn two_point_calibration_has_infinite_endpoints() {
        let out = calibrate_calls(&linear_to_zero(100.0), &InvertOptions::default()).unwrap();
        assert_eq!(out.calibration.measure.atoms(), &[Atom::infinite(0.0), Atom::infinite(200.0)]);
        assert!(out.report.within_tolerance);
    }

    #[test]
    fn csv_curve() {
        let c = CallCurve::from_csv("strike,price\n0,10\n10,0\n".as_bytes(), 2.0).unwrap();
        assert_eq!(c.spot(), 10.0);
        assert_eq!(c.maturity(), 2.0);
    }
}
