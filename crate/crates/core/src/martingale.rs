//! Local-martingale and martingale classification of gap diffusions.
//!
//! The process is a local martingale iff its support is `{x0}`, or on each side
//! of `x0` it either meets the infinity set (at or beyond `x0`) or has support
//! reaching to infinity. It is a true martingale iff its support is `{x0}`, or
//! `x0` lies in the infinity set, or `∫(1 + |x|) ν(dx)` diverges on both sides
//! of `x0`.
//!
//! Non-atomic tails are not computed, only declared: the measure's divergence
//! flags and optional per-side tail-moment declarations. Any declared tail
//! extends the support to infinity on its side.

use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::measure::SpeedMeasure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMoment {
    Finite,
    Infinite,
}

impl std::str::FromStr for TailMoment {
    type Err = GapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite" => Ok(TailMoment::Finite),
            "infinite" => Ok(TailMoment::Infinite),
            other => Err(GapError::Parse(format!("tail moment must be finite or infinite, got {other:?}"))),
        }
    }
}

/// Declared `∫(1 + |x|) ν(dx)` of the non-atomic part on each side of `x0`;
/// `None` means there is no non-atomic part on that side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailDeclarations {
    pub left: Option<TailMoment>,
    pub right: Option<TailMoment>,
}

impl TailDeclarations {
    pub fn new(left: Option<TailMoment>, right: Option<TailMoment>) -> Self {
        TailDeclarations { left, right }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reason {
    pub clause: &'static str,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MartingaleVerdict {
    pub local_martingale: bool,
    pub true_martingale: bool,
    pub reasons: Vec<Reason>,
}

/// Effective non-atomic tail on one side after reconciling flag and
/// declaration.
fn side_tail(flag: bool, declared: Option<TailMoment>, side: &'static str) -> Result<Option<TailMoment>> {
    match (flag, declared) {
        (true, Some(TailMoment::Finite)) => Err(GapError::ConflictingTailDeclaration { side, declared: "finite" }),
        (true, _) => Ok(Some(TailMoment::Infinite)),
        (false, d) => Ok(d),
    }
}

struct Sides {
    left: Option<TailMoment>,
    right: Option<TailMoment>,
}

fn sides(nu: &SpeedMeasure, tails: &TailDeclarations) -> Result<Sides> {
    Ok(Sides {
        left: side_tail(nu.left_tail_diverges(), tails.left, "left")?,
        right: side_tail(nu.right_tail_diverges(), tails.right, "right")?,
    })
}

fn support_is_start(nu: &SpeedMeasure, x0: f64, s: &Sides) -> bool {
    s.left.is_none() && s.right.is_none() && nu.atoms().len() == 1 && nu.atoms()[0].position == x0
}

fn reason(clause: &'static str, holds: bool, detail: impl Into<String>) -> Reason {
    Reason { clause, holds, detail: detail.into() }
}

fn local_reasons(nu: &SpeedMeasure, x0: f64, s: &Sides) -> (bool, Vec<Reason>) {
    if support_is_start(nu, x0, s) {
        return (true, vec![reason("support_is_start", true, format!("support is {{{x0}}}; the process is constant"))]);
    }
    let infinite = |pred: &dyn Fn(f64) -> bool| {
        nu.atoms().iter().any(|a| a.mass.is_infinite() && pred(a.position))
    };
    let left_inf = infinite(&|y| y <= x0);
    let right_inf = infinite(&|y| y >= x0);
    let left_ok = left_inf || s.left.is_some();
    let right_ok = right_inf || s.right.is_some();
    let describe = |inf: bool, tail: bool, side: &str| {
        if inf {
            format!("infinite atom on the {side} of x0")
        } else if tail {
            format!("support unbounded on the {side}")
        } else {
            format!("support bounded on the {side} with no infinite atom there")
        }
    };
    let reasons = vec![
        reason("support_is_start", false, format!("support is not {{{x0}}}")),
        reason("left_reach", left_ok, describe(left_inf, s.left.is_some(), "left")),
        reason("right_reach", right_ok, describe(right_inf, s.right.is_some(), "right")),
    ];
    (left_ok && right_ok, reasons)
}

/// Whether the gap diffusion started at `x0` is a local martingale.
pub fn classify_local(nu: &SpeedMeasure, x0: f64, tails: &TailDeclarations) -> Result<(bool, Vec<Reason>)> {
    let s = sides(nu, tails)?;
    Ok(local_reasons(nu, x0, &s))
}

/// Full verdict: local martingale and true martingale.
pub fn classify_true(nu: &SpeedMeasure, x0: f64, tails: &TailDeclarations) -> Result<MartingaleVerdict> {
    if !x0.is_finite() {
        return Err(GapError::InvalidArgument(format!("x0 = {x0} must be finite")));
    }
    let s = sides(nu, tails)?;
    let (local, mut reasons) = local_reasons(nu, x0, &s);
    if support_is_start(nu, x0, &s) {
        return Ok(MartingaleVerdict { local_martingale: true, true_martingale: true, reasons });
    }
    let start_inf = nu.atom_at(x0).is_some_and(|a| a.mass.is_infinite());
    reasons.push(reason(
        "start_in_infinity_set",
        start_inf,
        if start_inf { "x0 carries an infinite atom" } else { "x0 carries no infinite atom" },
    ));
    // Finitely many finite atoms contribute a finite amount; only an infinite
    // atom or a divergent non-atomic tail makes a side integral infinite.
    let diverges = |pred: &dyn Fn(f64) -> bool, tail: Option<TailMoment>| {
        tail == Some(TailMoment::Infinite) || nu.atoms().iter().any(|a| a.mass.is_infinite() && pred(a.position))
    };
    let left_div = diverges(&|y| y <= x0, s.left);
    let right_div = diverges(&|y| y >= x0, s.right);
    let integral = |d: bool| if d { "infinite" } else { "finite" };
    reasons.push(reason(
        "tail_integrals_diverge",
        left_div && right_div,
        format!(
            "∫(1+|x|)ν(dx) is {} left of x0 and {} right of x0",
            integral(left_div),
            integral(right_div)
        ),
    ));
    let true_martingale = local && (start_inf || (left_div && right_div));
    Ok(MartingaleVerdict { local_martingale: local, true_martingale, reasons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Atom;

    fn m(atoms: Vec<Atom>) -> SpeedMeasure {
        SpeedMeasure::from_atoms(atoms).unwrap()
    }

    #[test]
    fn constant_process_is_martingale() {
        let v = classify_true(&m(vec![Atom::infinite(2.0)]), 2.0, &TailDeclarations::default()).unwrap();
        assert!(v.local_martingale && v.true_martingale);
        assert!(!v.reasons.is_empty());
    }

    #[test]
    fn infinite_atoms_both_sides() {
        let nu = m(vec![Atom::infinite(-1.0), Atom::finite(0.0, 1.0), Atom::infinite(1.0)]);
        let v = classify_true(&nu, 0.0, &TailDeclarations::default()).unwrap();
        assert!(v.local_martingale && v.true_martingale);
    }

    #[test]
    fn bounded_reflecting_chain_is_not_local() {
        let nu = m(vec![Atom::finite(-1.0, 1.0), Atom::finite(1.0, 1.0)]);
        let (local, _) = classify_local(&nu, 0.0, &TailDeclarations::default()).unwrap();
        assert!(!local);
    }

    #[test]
    fn finite_declaration_contradicting_flag() {
        let nu = SpeedMeasure::default().with_tails(false, true);
        let decl = TailDeclarations::new(None, Some(TailMoment::Finite));
        assert_eq!(
            classify_true(&nu, 0.0, &decl),
            Err(GapError::ConflictingTailDeclaration { side: "right", declared: "finite" })
        );
    }

    #[test]
    fn start_in_infinity_set_overrides_tails() {
        let nu = m(vec![Atom::infinite(0.0)]);
        let decl = TailDeclarations::new(Some(TailMoment::Finite), Some(TailMoment::Finite));
        let v = classify_true(&nu, 0.0, &decl).unwrap();
        assert!(v.true_martingale);
    }

    #[test]
    fn parse_tail_moment() {
        assert_eq!("finite".parse::<TailMoment>().unwrap(), TailMoment::Finite);
        assert!("huge".parse::<TailMoment>().is_err());
    }
}
