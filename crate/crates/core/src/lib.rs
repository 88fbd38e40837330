//! Gap diffusions `X_t = B_{A_t}` driven by atomic speed measures: the forward
//! law of `X_1`, its numerical inverse, finite-support approximation of general
//! laws, Monte Carlo engines, martingale classification and call-price
//! calibration.

// `!(a < b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod chain;
pub mod error;
pub mod finance;
pub mod invert;
pub mod martingale;
pub mod measure;
pub mod numeric;
pub mod simulate;

pub use approx::{approx_invert, discretize, ApproxOptions, ApproxResult, QuantileTable, SampledLaw};
pub use chain::{build_chain, forward_law, law_at, ForwardOptions, GapChain, LawAtTime, RATE_CONVENTION};
pub use error::{GapError, Result};
pub use finance::{calibrate_calls, implied_law, reprice, CallCalibration, CallCurve};
pub use invert::{invert_discrete, jacobian_fd, CalibrationResult, InitialGuess, InvertOptions};
pub use martingale::{classify_local, classify_true, MartingaleVerdict, TailDeclarations, TailMoment};
pub use measure::{
    classify_support, initial_split, validate_measure, Atom, Mass, RawMeasure, SpeedMeasure, SupportClassification,
    TargetLaw,
};
pub use simulate::{estimate_ea1, simulate_jump, simulate_timechange, Engine, PathBundle, TimeChangeOptions};
