//! Named vector-field suites and suspension transversals.
//!
//! Experiments refer to fields by name so a config file fully determines a
//! run. Flat suites live on ℝ^p with exact first and second derivatives;
//! driver indices beyond the suite's support act as zero fields, so any
//! suite accepts any driver dimension. Leafwise families for the foliated
//! runs are built from the invariant combination ψ(c(y, z)) with
//! ψ(c) = 1 + cos(2πc)/2 and `c` the transversal coordinate advanced at
//! the deck rate, which makes V(y + e₁, F⁻¹z) = V(y, z) hold to rounding.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::HarnessError;
use crate::foliated::{LeafwiseVectorFieldFamily, SuspensionSpace, TransversalPoint};
use crate::rde_solver::VectorFieldFamily;

/// Rotation number of the circle suspension (the golden ratio fraction,
/// maximally irrational, so orbits never land on chart seams).
const CIRCLE_RHO: f64 = 0.618_033_988_749_894_9;
/// Truncation depth of the Cantor transversal.
const CANTOR_DEPTH: usize = 24;
/// Bits of the odometer entering the leafwise phase. Carries past bit `k`
/// leave the low `k` bits shifting by one per deck step, which is exactly
/// what the phase needs.
const CANTOR_PHASE_BITS: usize = 8;
/// Size of the finite cyclic transversal.
const FINITE_SYMBOLS: usize = 7;

/// Named field families on ℝ^p. Index 0 is the drift; index i >= 1 pairs
/// with driver coordinate i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldSuite {
    /// Every field zero: solutions are constant.
    Zero,
    /// V_i(x) = x_k e_k with k = (i-1) mod p: componentwise exponentials.
    Exponential,
    /// V_1(x) = (-x_2, x_1) on ℝ²: isometric rotation.
    Rotation,
    /// V_i(x) = e_k: additive noise, solutions shadow the driver exactly.
    Additive,
    /// V_0 = (1, ..., 1), no driver response: pure drift.
    Drift,
    /// V_i(x) = cos(x_k) e_k: bounded with bounded derivatives.
    Bounded,
}

impl FieldSuite {
    pub fn name(self) -> &'static str {
        match self {
            FieldSuite::Zero => "zero",
            FieldSuite::Exponential => "exponential",
            FieldSuite::Rotation => "rotation",
            FieldSuite::Additive => "additive",
            FieldSuite::Drift => "drift",
            FieldSuite::Bounded => "bounded",
        }
    }
}

impl FromStr for FieldSuite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zero" => Ok(FieldSuite::Zero),
            "exponential" => Ok(FieldSuite::Exponential),
            "rotation" => Ok(FieldSuite::Rotation),
            "additive" => Ok(FieldSuite::Additive),
            "drift" => Ok(FieldSuite::Drift),
            "bounded" => Ok(FieldSuite::Bounded),
            other => Err(format!(
                "unknown suite {other:?} (expected zero|exponential|rotation|additive|drift|bounded)"
            )),
        }
    }
}

/// Transversal of the suspension space used by foliated runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransversalKind {
    Circle,
    Cantor,
    Finite,
}

impl TransversalKind {
    pub fn name(self) -> &'static str {
        match self {
            TransversalKind::Circle => "circle",
            TransversalKind::Cantor => "cantor",
            TransversalKind::Finite => "finite",
        }
    }
}

impl FromStr for TransversalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "circle" => Ok(TransversalKind::Circle),
            "cantor" => Ok(TransversalKind::Cantor),
            "finite" => Ok(TransversalKind::Finite),
            other => Err(format!(
                "unknown transversal {other:?} (expected circle|cantor|finite)"
            )),
        }
    }
}

/// Builds the named suite on ℝ^p for a d-dimensional driver.
pub fn flat_family(
    suite: FieldSuite,
    p: usize,
    d: usize,
) -> Result<VectorFieldFamily, HarnessError> {
    if p == 0 || d == 0 {
        return Err(HarnessError::Config(
            "state and driver dimensions must be >= 1".into(),
        ));
    }
    if suite == FieldSuite::Rotation && p != 2 {
        return Err(HarnessError::Config(format!(
            "the rotation suite needs p = 2, got p = {p}"
        )));
    }
    let zero_hess = move |_: usize, _: &DVector<f64>| vec![DMatrix::zeros(p, p); p];
    Ok(match suite {
        FieldSuite::Zero => VectorFieldFamily::order2(
            p,
            d,
            move |_, _: &DVector<f64>| DVector::zeros(p),
            move |_, _: &DVector<f64>| DMatrix::zeros(p, p),
            zero_hess,
        ),
        FieldSuite::Exponential => VectorFieldFamily::order2(
            p,
            d,
            move |i, x: &DVector<f64>| {
                let mut v = DVector::zeros(p);
                if i >= 1 {
                    let k = (i - 1) % p;
                    v[k] = x[k];
                }
                v
            },
            move |i, _: &DVector<f64>| {
                let mut g = DMatrix::zeros(p, p);
                if i >= 1 {
                    let k = (i - 1) % p;
                    g[(k, k)] = 1.0;
                }
                g
            },
            zero_hess,
        ),
        FieldSuite::Rotation => VectorFieldFamily::order2(
            2,
            d,
            move |i, x: &DVector<f64>| {
                if i == 1 {
                    DVector::from_column_slice(&[-x[1], x[0]])
                } else {
                    DVector::zeros(2)
                }
            },
            move |i, _: &DVector<f64>| {
                if i == 1 {
                    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
                } else {
                    DMatrix::zeros(2, 2)
                }
            },
            move |_, _: &DVector<f64>| vec![DMatrix::zeros(2, 2); 2],
        ),
        FieldSuite::Additive => VectorFieldFamily::order2(
            p,
            d,
            move |i, _: &DVector<f64>| {
                let mut v = DVector::zeros(p);
                if i >= 1 {
                    v[(i - 1) % p] = 1.0;
                }
                v
            },
            move |_, _: &DVector<f64>| DMatrix::zeros(p, p),
            zero_hess,
        ),
        FieldSuite::Drift => VectorFieldFamily::order2(
            p,
            d,
            move |i, _: &DVector<f64>| {
                if i == 0 {
                    DVector::from_element(p, 1.0)
                } else {
                    DVector::zeros(p)
                }
            },
            move |_, _: &DVector<f64>| DMatrix::zeros(p, p),
            zero_hess,
        ),
        FieldSuite::Bounded => VectorFieldFamily::order2(
            p,
            d,
            move |i, x: &DVector<f64>| {
                let mut v = DVector::zeros(p);
                if i >= 1 {
                    let k = (i - 1) % p;
                    v[k] = x[k].cos();
                }
                v
            },
            move |i, x: &DVector<f64>| {
                let mut g = DMatrix::zeros(p, p);
                if i >= 1 {
                    let k = (i - 1) % p;
                    g[(k, k)] = -x[k].sin();
                }
                g
            },
            move |i, x: &DVector<f64>| {
                let mut h = vec![DMatrix::zeros(p, p); p];
                if i >= 1 {
                    let k = (i - 1) % p;
                    h[k][(k, k)] = -x[k].cos();
                }
                h
            },
        ),
    })
}

/// The suspension space a config names: golden-rotation circle, depth-24
/// odometer, or a cyclic shift on 7 symbols.
pub fn make_space(kind: TransversalKind, leaf_dim: usize) -> Result<SuspensionSpace, HarnessError> {
    Ok(match kind {
        TransversalKind::Circle => SuspensionSpace::circle_rotation(CIRCLE_RHO, leaf_dim)?,
        TransversalKind::Cantor => SuspensionSpace::cantor_odometer(CANTOR_DEPTH, leaf_dim)?,
        TransversalKind::Finite => {
            let perm = (0..FINITE_SYMBOLS).map(|i| (i + 1) % FINITE_SYMBOLS).collect();
            SuspensionSpace::finite_permutation(perm, leaf_dim)?
        }
    })
}

/// The deterministic transversal base point experiments start from.
pub fn base_point(kind: TransversalKind) -> TransversalPoint {
    match kind {
        TransversalKind::Circle => TransversalPoint::Circle(0),
        TransversalKind::Cantor => TransversalPoint::Cantor(vec![false; CANTOR_DEPTH]),
        TransversalKind::Finite => TransversalPoint::Finite(0),
    }
}

/// One-line space description for manifests.
pub fn describe_space(kind: TransversalKind) -> String {
    match kind {
        TransversalKind::Circle => format!("suspension of the circle rotation rho = {CIRCLE_RHO}"),
        TransversalKind::Cantor => {
            format!("suspension of the dyadic odometer at depth {CANTOR_DEPTH}")
        }
        TransversalKind::Finite => {
            format!("suspension of the cyclic shift on {FINITE_SYMBOLS} symbols")
        }
    }
}

/// Phase map c(y₁, z) whose level sets are invariant under
/// (y, z) ↦ (y + e₁, F⁻¹ z): the transversal coordinate plus y₁ times the
/// deck rate. Wrong-kind points surface as NaN and trip the solver's
/// finiteness checks instead of panicking.
#[derive(Debug, Clone, Copy)]
enum Phase {
    Circle { rho: f64 },
    Cantor { bits: usize },
    Finite { n: usize },
}

impl Phase {
    fn of(self, y1: f64, z: &TransversalPoint) -> f64 {
        match (self, z) {
            (Phase::Circle { rho }, TransversalPoint::Circle(_)) => {
                z.angle().expect("circle points have an angle") + rho * y1
            }
            (Phase::Cantor { bits }, TransversalPoint::Cantor(word)) => {
                let mut low = 0.0f64;
                for (i, &b) in word.iter().enumerate().take(bits) {
                    if b {
                        low += (i as f64).exp2();
                    }
                }
                (low + y1) * (-(bits as f64)).exp2()
            }
            (Phase::Finite { n }, TransversalPoint::Finite(i)) => (*i as f64 + y1) / n as f64,
            _ => f64::NAN,
        }
    }

    /// dc/dy₁.
    fn slope(self) -> f64 {
        match self {
            Phase::Circle { rho } => rho,
            Phase::Cantor { bits } => (-(bits as f64)).exp2(),
            Phase::Finite { n } => 1.0 / n as f64,
        }
    }
}

fn psi(c: f64) -> f64 {
    1.0 + 0.5 * (TAU * c).cos()
}

fn dpsi(c: f64) -> f64 {
    -PI * (TAU * c).sin()
}

fn ddpsi(c: f64) -> f64 {
    -2.0 * PI * PI * (TAU * c).cos()
}

/// Leafwise family V₁(y, z) = ψ(c(y₁, z)) e₁ (other indices zero) with
/// exact fiber derivatives. The phase `c` advances at the deck rate, so
/// the family satisfies the periodicity contract on `space`.
pub fn invariant_leafwise_family(
    kind: TransversalKind,
    space: &SuspensionSpace,
    d: usize,
) -> Result<LeafwiseVectorFieldFamily, HarnessError> {
    let p = space.leaf_dim();
    let phase = match kind {
        TransversalKind::Circle => {
            // The generator's angle is the rotation number as quantized,
            // which is the rate the invariance argument needs.
            let rho = space
                .deck(&TransversalPoint::Circle(0), 1)?
                .angle()
                .expect("circle deck yields a circle point");
            Phase::Circle { rho }
        }
        TransversalKind::Cantor => Phase::Cantor {
            bits: CANTOR_PHASE_BITS,
        },
        TransversalKind::Finite => Phase::Finite { n: FINITE_SYMBOLS },
    };
    Ok(LeafwiseVectorFieldFamily::order2(
        p,
        d,
        move |i, y: &DVector<f64>, z: &TransversalPoint| {
            let mut v = DVector::zeros(p);
            if i == 1 {
                v[0] = psi(phase.of(y[0], z));
            }
            v
        },
        move |i, y: &DVector<f64>, z: &TransversalPoint| {
            let mut g = DMatrix::zeros(p, p);
            if i == 1 {
                g[(0, 0)] = dpsi(phase.of(y[0], z)) * phase.slope();
            }
            g
        },
        move |i, y: &DVector<f64>, z: &TransversalPoint| {
            let mut h = vec![DMatrix::zeros(p, p); p];
            if i == 1 {
                h[0][(0, 0)] = ddpsi(phase.of(y[0], z)) * phase.slope() * phase.slope();
            }
            h
        },
    ))
}

/// Leafwise family with every field zero.
pub fn zero_leafwise_family(space: &SuspensionSpace, d: usize) -> LeafwiseVectorFieldFamily {
    let p = space.leaf_dim();
    LeafwiseVectorFieldFamily::order2(
        p,
        d,
        move |_, _: &DVector<f64>, _: &TransversalPoint| DVector::zeros(p),
        move |_, _: &DVector<f64>, _: &TransversalPoint| DMatrix::zeros(p, p),
        move |_, _: &DVector<f64>, _: &TransversalPoint| vec![DMatrix::zeros(p, p); p],
    )
}

/// Leafwise translation V₁ = e₁: y₁ copies driver coordinate 1, so the
/// winding after time T is ⌊y₁(0) + w¹_T⌋.
pub fn translation_leafwise_family(space: &SuspensionSpace, d: usize) -> LeafwiseVectorFieldFamily {
    let p = space.leaf_dim();
    LeafwiseVectorFieldFamily::order2(
        p,
        d,
        move |i, _: &DVector<f64>, _: &TransversalPoint| {
            let mut v = DVector::zeros(p);
            if i == 1 {
                v[0] = 1.0;
            }
            v
        },
        move |_, _: &DVector<f64>, _: &TransversalPoint| DMatrix::zeros(p, p),
        move |_, _: &DVector<f64>, _: &TransversalPoint| vec![DMatrix::zeros(p, p); p],
    )
}
