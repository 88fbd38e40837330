//! Speed measures, target laws and the support classification around a start
//! point.
//!
//! A [`SpeedMeasure`] is a finite list of atoms plus two flags that summarise a
//! non-atomic part through the divergence of its tail integrals
//! `∫ (1 + |x|) ν(dx)` on either side. Infinite masses are a distinct variant of
//! [`Mass`], never a large float, so absorption decisions are exact.

use std::cmp::Ordering;
use std::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::numeric::{compensated_sum, extended};

/// Mass carried by a single atom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mass {
    Finite(f64),
    Infinite,
}

impl Mass {
    pub fn is_infinite(self) -> bool {
        matches!(self, Mass::Infinite)
    }

    /// The finite value, or `None` for an infinite mass.
    pub fn finite(self) -> Option<f64> {
        match self {
            Mass::Finite(m) => Some(m),
            Mass::Infinite => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Mass::Finite(m) => m,
            Mass::Infinite => f64::INFINITY,
        }
    }

    /// Builds a mass from an `f64`, mapping `+∞` to [`Mass::Infinite`].
    pub fn from_f64(m: f64) -> Mass {
        if m == f64::INFINITY {
            Mass::Infinite
        } else {
            Mass::Finite(m)
        }
    }

    fn add(self, other: Mass) -> Mass {
        match (self, other) {
            (Mass::Finite(a), Mass::Finite(b)) => Mass::Finite(a + b),
            _ => Mass::Infinite,
        }
    }

    /// Multiplies a finite mass by `c > 0`; infinite masses stay infinite.
    pub fn scaled(self, c: f64) -> Mass {
        match self {
            Mass::Finite(m) => Mass::Finite(m * c),
            Mass::Infinite => Mass::Infinite,
        }
    }
}

impl fmt::Display for Mass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mass::Finite(m) => write!(f, "{m}"),
            Mass::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Mass {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Mass::Finite(m) => s.serialize_f64(*m),
            Mass::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Mass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        extended::deserialize(d).map(Mass::from_f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub position: f64,
    pub mass: Mass,
}

impl Atom {
    pub fn new(position: f64, mass: Mass) -> Self {
        Atom { position, mass }
    }

    pub fn finite(position: f64, mass: f64) -> Self {
        Atom::new(position, Mass::Finite(mass))
    }

    pub fn infinite(position: f64) -> Self {
        Atom::new(position, Mass::Infinite)
    }
}

impl Serialize for Atom {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&self.position)?;
        t.serialize_element(&self.mass)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for Atom {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct AtomVisitor;
        impl<'de> Visitor<'de> for AtomVisitor {
            type Value = Atom;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [position, mass] pair")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Atom, A::Error> {
                let position: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let mass: Mass = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(Atom { position, mass })
            }
        }
        d.deserialize_tuple(2, AtomVisitor)
    }
}

/// Unvalidated measure as it appears on the wire.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawMeasure {
    pub atoms: Vec<Atom>,
    #[serde(default)]
    pub left_tail_diverges: bool,
    #[serde(default)]
    pub right_tail_diverges: bool,
}

/// A validated speed measure: atoms strictly increasing in position, every
/// mass strictly positive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure", into = "RawMeasure")]
pub struct SpeedMeasure {
    atoms: Vec<Atom>,
    left_tail_diverges: bool,
    right_tail_diverges: bool,
}

impl TryFrom<RawMeasure> for SpeedMeasure {
    type Error = GapError;
    fn try_from(raw: RawMeasure) -> Result<Self> {
        validate_measure(raw)
    }
}

impl From<SpeedMeasure> for RawMeasure {
    fn from(m: SpeedMeasure) -> Self {
        RawMeasure {
            atoms: m.atoms,
            left_tail_diverges: m.left_tail_diverges,
            right_tail_diverges: m.right_tail_diverges,
        }
    }
}

/// Sorts and merges atoms, summing masses at equal positions and dropping
/// zero masses.
pub fn validate_measure(raw: RawMeasure) -> Result<SpeedMeasure> {
    let mut atoms = raw.atoms;
    for a in &atoms {
        if a.position.is_nan() {
            return Err(GapError::NanPosition);
        }
        if let Mass::Finite(m) = a.mass {
            if m.is_nan() {
                return Err(GapError::NanMass { position: a.position });
            }
            if m < 0.0 {
                return Err(GapError::NegativeMass { position: a.position, mass: m });
            }
        }
    }
    atoms.sort_by(|a, b| a.position.partial_cmp(&b.position).unwrap_or(Ordering::Equal));
    let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
    for a in atoms {
        match merged.last_mut() {
            Some(last) if last.position == a.position => last.mass = last.mass.add(a.mass),
            _ => merged.push(a),
        }
    }
    merged.retain(|a| a.mass != Mass::Finite(0.0));
    Ok(SpeedMeasure {
        atoms: merged,
        left_tail_diverges: raw.left_tail_diverges,
        right_tail_diverges: raw.right_tail_diverges,
    })
}

impl SpeedMeasure {
    /// Purely atomic measure; see [`validate_measure`].
    pub fn from_atoms(atoms: Vec<Atom>) -> Result<Self> {
        validate_measure(RawMeasure { atoms, ..Default::default() })
    }

    pub fn with_tails(mut self, left_diverges: bool, right_diverges: bool) -> Self {
        self.left_tail_diverges = left_diverges;
        self.right_tail_diverges = right_diverges;
        self
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn left_tail_diverges(&self) -> bool {
        self.left_tail_diverges
    }

    pub fn right_tail_diverges(&self) -> bool {
        self.right_tail_diverges
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty() && !self.left_tail_diverges && !self.right_tail_diverges
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.position)
    }

    /// Atom located exactly at `x`, if any.
    pub fn atom_at(&self, x: f64) -> Option<&Atom> {
        self.atoms
            .binary_search_by(|a| a.position.partial_cmp(&x).unwrap_or(Ordering::Less))
            .ok()
            .map(|i| &self.atoms[i])
    }

    /// Scales every finite mass by `c > 0`.
    pub fn scaled(&self, c: f64) -> SpeedMeasure {
        SpeedMeasure {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom::new(a.position, a.mass.scaled(c)))
                .collect(),
            ..*self
        }
    }

    /// Adds atoms, re-validating the result.
    pub fn with_atoms(&self, extra: &[Atom]) -> Result<SpeedMeasure> {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(extra);
        validate_measure(RawMeasure {
            atoms,
            left_tail_diverges: self.left_tail_diverges,
            right_tail_diverges: self.right_tail_diverges,
        })
    }
}

/// Finite-support probability law with strictly increasing points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLaw", into = "RawLaw")]
pub struct TargetLaw {
    points: Vec<(f64, f64)>,
    mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawLaw {
    pub points: Vec<(f64, f64)>,
}

impl TryFrom<RawLaw> for TargetLaw {
    type Error = GapError;
    fn try_from(raw: RawLaw) -> Result<Self> {
        TargetLaw::new(raw.points)
    }
}

impl From<TargetLaw> for RawLaw {
    fn from(l: TargetLaw) -> Self {
        RawLaw { points: l.points }
    }
}

pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

impl TargetLaw {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(GapError::InvalidLaw("law has no points".into()));
        }
        for w in points.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(GapError::InvalidLaw(format!(
                    "points must be strictly increasing: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(y, p) in &points {
            if !y.is_finite() {
                return Err(GapError::InvalidLaw(format!("non-finite point {y}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(GapError::InvalidLaw(format!("probability {p} at {y} outside [0,1]")));
            }
        }
        let total = compensated_sum(points.iter().map(|&(_, p)| p));
        if (total - 1.0).abs() > PROBABILITY_SUM_TOL {
            return Err(GapError::InvalidLaw(format!("probabilities sum to {total}")));
        }
        let mean = compensated_sum(points.iter().map(|&(y, p)| y * p));
        Ok(TargetLaw { points, mean })
    }

    /// Sorts, merges equal positions and renormalises tiny rounding drift in
    /// the total before validating.
    pub fn from_unsorted(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        for (y, p) in points {
            match merged.last_mut() {
                Some(last) if last.0 == y => last.1 += p,
                _ => merged.push((y, p)),
            }
        }
        TargetLaw::new(merged)
    }

    pub fn dirac(x: f64) -> Self {
        TargetLaw { points: vec![(x, 1.0)], mean: x }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn positions(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean;
        compensated_sum(self.points.iter().map(|&(y, p)| p * (y - m) * (y - m)))
    }

    pub fn abs_moment(&self) -> f64 {
        compensated_sum(self.points.iter().map(|&(y, p)| p * y.abs()))
    }

    /// Same law with zero-probability points removed.
    pub fn trimmed(&self) -> TargetLaw {
        TargetLaw {
            points: self.points.iter().copied().filter(|&(_, p)| p > 0.0).collect(),
            mean: self.mean,
        }
    }
}

/// Nearest support and infinity-set points around a start point. Missing
/// points are reported as `∓∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportClassification {
    #[serde(with = "extended")]
    pub xs_minus: f64,
    #[serde(with = "extended")]
    pub xs_plus: f64,
    #[serde(with = "extended")]
    pub xinf_minus: f64,
    #[serde(with = "extended")]
    pub xinf_plus: f64,
    pub x0_in_supp: bool,
    pub x0_in_suppinf: bool,
}

/// The support of an atomic measure is the set of atom positions and its
/// infinity set is the set of infinite atoms. Tail flags only mark directions
/// towards `∓∞` and do not contribute finite points.
pub fn classify_support(nu: &SpeedMeasure, x0: f64) -> SupportClassification {
    let below = |pred: &dyn Fn(&Atom) -> bool| {
        nu.atoms
            .iter()
            .rev()
            .find(|a| a.position <= x0 && pred(a))
            .map_or(f64::NEG_INFINITY, |a| a.position)
    };
    let above = |pred: &dyn Fn(&Atom) -> bool| {
        nu.atoms
            .iter()
            .find(|a| a.position >= x0 && pred(a))
            .map_or(f64::INFINITY, |a| a.position)
    };
    let at = nu.atom_at(x0);
    SupportClassification {
        xs_minus: below(&|_| true),
        xs_plus: above(&|_| true),
        xinf_minus: below(&|a| a.mass.is_infinite()),
        xinf_plus: above(&|a| a.mass.is_infinite()),
        x0_in_supp: at.is_some(),
        x0_in_suppinf: at.is_some_and(|a| a.mass.is_infinite()),
    }
}

/// Law of `X_0`: Brownian motion started at `x0` run until it first hits the
/// support.
pub fn initial_split(cls: &SupportClassification, x0: f64) -> Result<TargetLaw> {
    if cls.x0_in_supp {
        return Ok(TargetLaw::dirac(x0));
    }
    let lo = cls.xs_minus;
    let hi = cls.xs_plus;
    match (lo.is_finite(), hi.is_finite()) {
        (false, false) => Err(GapError::EmptySupport),
        (false, true) => Ok(TargetLaw::dirac(hi)),
        (true, false) => Ok(TargetLaw::dirac(lo)),
        (true, true) => {
            let width = hi - lo;
            let w_hi = (x0 - lo) / width;
            let w_lo = (hi - x0) / width;
            let mean = compensated_sum([lo * w_lo, hi * w_hi]);
            Ok(TargetLaw { points: vec![(lo, w_lo), (hi, w_hi)], mean })
        }
    }
}
