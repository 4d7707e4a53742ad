//! Suspension foliated spaces and chart-continuation RDE solving.
//!
//! A suspension space is the quotient of ℝ × ℝ^{p−1} × Z by the ℤ-action
//! (y, z) ↦ (y − n e₁, Fⁿ(z)), where Z is a compact transversal (circle,
//! Cantor set, or finite set) and F a homeomorphism of Z with exact inverse.
//! Points are stored in canonical chart form: fiber coordinate y with
//! y[0] ∈ [0, 1), transversal coordinate z, and an integer winding that
//! names the plaque chain traversed so far.
//!
//! Leafwise fields V_i(y, z) are C^k in y, continuous in z, and satisfy the
//! periodicity contract V_i(y + e₁, F⁻¹(z)) = V_i(y, z), which makes the
//! driven dynamics well defined on the quotient. Solving proceeds by chart
//! continuation: between chart events the transversal coordinate is frozen
//! and the fiber equation dy = Σ V_i(y, z) dw^i + V₀(y, z) dt is advanced by
//! the second-order scheme; when the fiber coordinate leaves the active
//! chart the deck transformation is applied exactly and the solve continues.
//! The atlas is the pair of overlapping fiber intervals (−¼, ¾) and
//! (¼, 5⁄4); inner-edge exits are pure relabelings on the overlap, outer
//! edges deck. Crossings of integer fiber values are located by bisection
//! and recorded as transitions, each moving the transversal coordinate by
//! exactly one deck step, so the emitted z is bit-identical between
//! transitions.

use crate::rde_solver::{
    davie_step, davie_step_augmented, leg_boundaries, leg_substeps, AugState, JacobianFlow,
    SolveConfig, SolveError, VectorFieldFamily, JACOBIAN_COND_LIMIT, MAX_REFINE_DOUBLINGS,
};
use crate::rough_lift::fmt_f64;
use crate::tensor_algebra::{time_reverse, time_shift, CellKind, GridRoughPath, TensorError};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Hard cap on recorded transitions per solve; exceeding it signals a
/// runaway winding (or a field pathologically fast along the fiber).
pub const MAX_TRANSITIONS: usize = 10_000;

/// Chart events are located to this accuracy in the fiber coordinate.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Tolerance for the periodicity contract on random probes.
pub const PERIODICITY_TOL: f64 = 1e-12;

/// Maximum Cantor depth; words are folded through u64 arithmetic so the
/// odometer stays exact.
pub const MAX_CANTOR_DEPTH: usize = 63;

const TWO64: f64 = 18_446_744_073_709_551_616.0;
const BISECT_MAX: usize = 200;

#[derive(Debug, Error)]
pub enum FoliatedError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("transversal point does not belong to this space")]
    KindMismatch,
    #[error("fiber coordinate {y} outside the fundamental domain [0, 1)")]
    BadFiber { y: f64 },
    #[error("more than {max} deck transitions before t = {t}")]
    TooManyTransitions { max: usize, t: f64 },
    #[error("periodicity contract violated for field {field} at probe {probe}: |Δ| = {err:.3e}")]
    PeriodicityViolation { field: usize, probe: usize, err: f64 },
    #[error("transversal coordinate inconsistent at sample {index} (t = {t})")]
    LeafViolation { index: usize, t: f64 },
    #[error("transition at t = {t} is not a single deck step")]
    BadTransition { t: f64 },
    #[error("leafwise Jacobian is singular at t = {t}")]
    SingularJacobian { t: f64 },
    #[error("permutation is not a bijection")]
    BadPermutation,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// The transversal model space. Circle points are 64-bit fixed-point turns
/// (arc length over the circumference), Cantor points are binary words of a
/// fixed depth with metric 2^{−(common prefix length)}, finite points carry
/// the discrete metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transversal {
    Circle,
    Cantor { depth: usize },
    Finite { size: usize },
}

/// A point of a transversal. Equality is exact (bitwise); that exactness is
/// what leaf-preservation statements quantify over.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TransversalPoint {
    Circle(u64),
    Cantor(Vec<bool>),
    Finite(usize),
}

impl TransversalPoint {
    /// Circle angle in turns ∈ [0, 1); `None` for the other kinds.
    pub fn angle(&self) -> Option<f64> {
        match self {
            TransversalPoint::Circle(v) => Some(*v as f64 / TWO64),
            _ => None,
        }
    }

    /// Export form: circle angle in turns, Cantor bit word, finite label.
    pub fn repr(&self) -> String {
        match self {
            TransversalPoint::Circle(v) => fmt_f64(*v as f64 / TWO64),
            TransversalPoint::Cantor(bits) => {
                bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
            }
            TransversalPoint::Finite(i) => i.to_string(),
        }
    }
}

/// The deck homeomorphism F: rotation by a quantized angle, the binary
/// odometer (add one with carry), or a permutation. All three act exactly
/// on the stored representations, so Fⁿ ∘ F⁻ⁿ is the identity bitwise.
#[derive(Debug, Clone, PartialEq, Eq)]
enum DeckMap {
    Rotation { turns: u64 },
    Odometer,
    Permutation { perm: Vec<usize>, inv: Vec<usize> },
}

/// A mapping torus: transversal Z, deck map F, fiber dimension p. Only the
/// first fiber coordinate is periodic; the remaining p − 1 run over ℝ.
#[derive(Debug, Clone, PartialEq)]
pub struct SuspensionSpace {
    transversal: Transversal,
    deck: DeckMap,
    leaf_dim: usize,
}

impl SuspensionSpace {
    /// Circle transversal with deck = rotation by `rho` turns. The angle is
    /// quantized to 64-bit fixed point, so deck powers compose exactly and
    /// rational/irrational behaviour is that of the quantized angle.
    pub fn circle_rotation(rho: f64, leaf_dim: usize) -> Result<Self, FoliatedError> {
        if !rho.is_finite() {
            return Err(FoliatedError::Config(format!(
                "rotation angle must be finite, got {rho}"
            )));
        }
        if leaf_dim == 0 {
            return Err(FoliatedError::Config("leaf dimension must be at least 1".into()));
        }
        let frac = rho.rem_euclid(1.0);
        let turns = ((frac * TWO64).round() as u128 & u64::MAX as u128) as u64;
        Ok(SuspensionSpace {
            transversal: Transversal::Circle,
            deck: DeckMap::Rotation { turns },
            leaf_dim,
        })
    }

    /// Cantor transversal of the given depth with deck = odometer.
    pub fn cantor_odometer(depth: usize, leaf_dim: usize) -> Result<Self, FoliatedError> {
        if depth == 0 || depth > MAX_CANTOR_DEPTH {
            return Err(FoliatedError::Config(format!(
                "Cantor depth must lie in [1, {MAX_CANTOR_DEPTH}], got {depth}"
            )));
        }
        if leaf_dim == 0 {
            return Err(FoliatedError::Config("leaf dimension must be at least 1".into()));
        }
        Ok(SuspensionSpace {
            transversal: Transversal::Cantor { depth },
            deck: DeckMap::Odometer,
            leaf_dim,
        })
    }

    /// Finite transversal with deck = the given permutation (as the image
    /// list `perm[i] = F(i)`).
    pub fn finite_permutation(perm: Vec<usize>, leaf_dim: usize) -> Result<Self, FoliatedError> {
        let n = perm.len();
        if n == 0 || leaf_dim == 0 {
            return Err(FoliatedError::Config(
                "empty permutation or zero leaf dimension".into(),
            ));
        }
        let mut inv = vec![usize::MAX; n];
        for (i, &j) in perm.iter().enumerate() {
            if j >= n || inv[j] != usize::MAX {
                return Err(FoliatedError::BadPermutation);
            }
            inv[j] = i;
        }
        Ok(SuspensionSpace {
            transversal: Transversal::Finite { size: n },
            deck: DeckMap::Permutation { perm, inv },
            leaf_dim,
        })
    }

    pub fn leaf_dim(&self) -> usize {
        self.leaf_dim
    }

    pub fn transversal(&self) -> Transversal {
        self.transversal
    }

    /// Whether `z` is a point of this space's transversal.
    pub fn contains(&self, z: &TransversalPoint) -> bool {
        match (self.transversal, z) {
            (Transversal::Circle, TransversalPoint::Circle(_)) => true,
            (Transversal::Cantor { depth }, TransversalPoint::Cantor(bits)) => bits.len() == depth,
            (Transversal::Finite { size }, TransversalPoint::Finite(i)) => *i < size,
            _ => false,
        }
    }

    /// `n`-th deck power Fⁿ(z), exact for every n.
    pub fn deck(&self, z: &TransversalPoint, n: i64) -> Result<TransversalPoint, FoliatedError> {
        if !self.contains(z) {
            return Err(FoliatedError::KindMismatch);
        }
        Ok(match (&self.deck, z) {
            (DeckMap::Rotation { turns }, TransversalPoint::Circle(v)) => {
                // Wrapping arithmetic is the group law on ℤ/2⁶⁴.
                TransversalPoint::Circle(v.wrapping_add(turns.wrapping_mul(n as u64)))
            }
            (DeckMap::Odometer, TransversalPoint::Cantor(bits)) => {
                // Little-endian fold: the odometer is addition on ℤ/2^depth.
                let depth = bits.len();
                let mask: u64 = (1u64 << depth) - 1;
                let mut word: u64 = 0;
                for (i, &b) in bits.iter().enumerate() {
                    if b {
                        word |= 1 << i;
                    }
                }
                let shift = n.rem_euclid(1i64 << depth) as u64;
                let out = word.wrapping_add(shift) & mask;
                TransversalPoint::Cantor((0..depth).map(|i| out >> i & 1 == 1).collect())
            }
            (DeckMap::Permutation { perm, inv }, TransversalPoint::Finite(i)) => {
                // Reduce n modulo the cycle through i, then walk the shorter
                // way around (forward via perm, backward via inv).
                let mut len = 1usize;
                let mut probe = perm[*i];
                while probe != *i {
                    len += 1;
                    probe = perm[probe];
                }
                let k = n.rem_euclid(len as i64) as usize;
                let mut cur = *i;
                if 2 * k <= len {
                    for _ in 0..k {
                        cur = perm[cur];
                    }
                } else {
                    for _ in 0..len - k {
                        cur = inv[cur];
                    }
                }
                TransversalPoint::Finite(cur)
            }
            _ => unreachable!("contains() matched the kind"),
        })
    }

    /// Metric on the transversal: arc length in turns on the circle,
    /// 2^{−(common prefix)} on the Cantor set, discrete on a finite set.
    pub fn transversal_distance(
        &self,
        a: &TransversalPoint,
        b: &TransversalPoint,
    ) -> Result<f64, FoliatedError> {
        if !self.contains(a) || !self.contains(b) {
            return Err(FoliatedError::KindMismatch);
        }
        Ok(match (a, b) {
            (TransversalPoint::Circle(u), TransversalPoint::Circle(v)) => {
                let d = u.wrapping_sub(*v);
                d.min(d.wrapping_neg()) as f64 / TWO64
            }
            (TransversalPoint::Cantor(x), TransversalPoint::Cantor(y)) => {
                match x.iter().zip(y).position(|(p, q)| p != q) {
                    Some(k) => (-(k as f64)).exp2(),
                    None => 0.0,
                }
            }
            (TransversalPoint::Finite(i), TransversalPoint::Finite(j)) => {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
            _ => unreachable!("contains() matched the kinds"),
        })
    }

    /// Distance between two points of the space: Euclidean in the fiber
    /// with the first coordinate folded around the circle, plus the
    /// transversal metric.
    pub fn distance(&self, a: &LeafPoint, b: &LeafPoint) -> Result<f64, FoliatedError> {
        if a.y.len() != self.leaf_dim || b.y.len() != self.leaf_dim {
            return Err(FoliatedError::Config("leaf point dimension mismatch".into()));
        }
        let wrap = (a.y[0] - b.y[0]).abs();
        let mut sq = wrap.min(1.0 - wrap).powi(2);
        for i in 1..self.leaf_dim {
            sq += (a.y[i] - b.y[i]).powi(2);
        }
        Ok(sq.sqrt() + self.transversal_distance(&a.z, &b.z)?)
    }

    /// Uniformly random transversal point (for probing contracts).
    pub fn random_point(&self, rng: &mut ChaCha8Rng) -> TransversalPoint {
        match self.transversal {
            Transversal::Circle => TransversalPoint::Circle(rng.random::<u64>()),
            Transversal::Cantor { depth } => {
                TransversalPoint::Cantor((0..depth).map(|_| rng.random::<bool>()).collect())
            }
            Transversal::Finite { size } => TransversalPoint::Finite(rng.random_range(0..size)),
        }
    }

    /// Folds an arbitrary fiber lift into canonical form, applying the
    /// matching deck power: (y, z) ↦ (y − n e₁, Fⁿ(z)) with n = ⌊y₁⌋.
    pub fn canonicalize(
        &self,
        y: DVector<f64>,
        z: TransversalPoint,
    ) -> Result<LeafPoint, FoliatedError> {
        if y.len() != self.leaf_dim {
            return Err(FoliatedError::Config("leaf point dimension mismatch".into()));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(FoliatedError::BadFiber { y: y[0] });
        }
        let mut n = y[0].floor() as i64;
        let mut yc = y;
        yc[0] -= n as f64;
        if yc[0] >= 1.0 {
            // y₁ − ⌊y₁⌋ can round up to 1 when y₁ sits just below an
            // integer; fold once more.
            yc[0] = 0.0;
            n += 1;
        }
        let zc = self.deck(&z, n)?;
        Ok(LeafPoint { y: yc, z: zc, winding: n })
    }
}

/// A point of the suspension space in canonical chart form: fiber
/// coordinate y with y[0] ∈ [0, 1), transversal coordinate z, accumulated
/// winding.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPoint {
    y: DVector<f64>,
    z: TransversalPoint,
    winding: i64,
}

impl LeafPoint {
    pub fn new(y: DVector<f64>, z: TransversalPoint) -> Result<Self, FoliatedError> {
        if y.is_empty() || !y.iter().all(|v| v.is_finite()) {
            return Err(FoliatedError::Config(
                "fiber coordinate must be finite and nonempty".into(),
            ));
        }
        if !(0.0..1.0).contains(&y[0]) {
            return Err(FoliatedError::BadFiber { y: y[0] });
        }
        Ok(LeafPoint { y, z, winding: 0 })
    }

    pub fn with_winding(mut self, winding: i64) -> Self {
        self.winding = winding;
        self
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn z(&self) -> &TransversalPoint {
        &self.z
    }

    pub fn winding(&self) -> i64 {
        self.winding
    }
}

type LeafEvalFn = dyn Fn(usize, &DVector<f64>, &TransversalPoint) -> DVector<f64> + Send + Sync;
type LeafGradFn = dyn Fn(usize, &DVector<f64>, &TransversalPoint) -> DMatrix<f64> + Send + Sync;
type LeafHessFn =
    dyn Fn(usize, &DVector<f64>, &TransversalPoint) -> Vec<DMatrix<f64>> + Send + Sync;

/// Leafwise fields V_i(y, z), i = 0..d with index 0 the drift, C^k in y and
/// continuous in z, subject to the periodicity contract
/// V_i(y + e₁, F⁻¹(z)) = V_i(y, z).
#[derive(Clone)]
pub struct LeafwiseVectorFieldFamily {
    state_dim: usize,
    driver_dim: usize,
    order: usize,
    drift_sign: f64,
    eval: Arc<LeafEvalFn>,
    grad: Option<Arc<LeafGradFn>>,
    hess: Option<Arc<LeafHessFn>>,
}

impl fmt::Debug for LeafwiseVectorFieldFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LeafwiseVectorFieldFamily")
            .field("state_dim", &self.state_dim)
            .field("driver_dim", &self.driver_dim)
            .field("order", &self.order)
            .field("drift_sign", &self.drift_sign)
            .finish_non_exhaustive()
    }
}

impl LeafwiseVectorFieldFamily {
    /// Values and fiber Jacobians (order 1): enough for plain solving.
    pub fn order1(
        state_dim: usize,
        driver_dim: usize,
        eval: impl Fn(usize, &DVector<f64>, &TransversalPoint) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        grad: impl Fn(usize, &DVector<f64>, &TransversalPoint) -> DMatrix<f64>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        LeafwiseVectorFieldFamily {
            state_dim,
            driver_dim,
            order: 1,
            drift_sign: 1.0,
            eval: Arc::new(eval),
            grad: Some(Arc::new(grad)),
            hess: None,
        }
    }

    /// Values, fiber Jacobians and Hessians (order 2): required for
    /// Jacobian flows.
    pub fn order2(
        state_dim: usize,
        driver_dim: usize,
        eval: impl Fn(usize, &DVector<f64>, &TransversalPoint) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        grad: impl Fn(usize, &DVector<f64>, &TransversalPoint) -> DMatrix<f64>
            + Send
            + Sync
            + 'static,
        hess: impl Fn(usize, &DVector<f64>, &TransversalPoint) -> Vec<DMatrix<f64>>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        LeafwiseVectorFieldFamily {
            state_dim,
            driver_dim,
            order: 2,
            drift_sign: 1.0,
            eval: Arc::new(eval),
            grad: Some(Arc::new(grad)),
            hess: Some(Arc::new(hess)),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn driver_dim(&self) -> usize {
        self.driver_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Same family with the drift field negated (for time reversal).
    /// Flipping twice restores the original.
    pub fn with_flipped_drift(&self) -> Self {
        let mut flipped = self.clone();
        flipped.drift_sign = -self.drift_sign;
        flipped
    }

    /// The frozen-transversal family y ↦ V_i(y, z): an ordinary family on
    /// the fiber suitable for the chart solver. Freezing commutes with
    /// drift flipping.
    pub fn freeze(&self, z: &TransversalPoint) -> VectorFieldFamily {
        let ev = Arc::clone(&self.eval);
        let z0 = z.clone();
        let family = match (self.grad.clone(), self.hess.clone()) {
            (Some(gr), Some(hs)) => {
                let (zg, zh) = (z.clone(), z.clone());
                VectorFieldFamily::order2(
                    self.state_dim,
                    self.driver_dim,
                    move |i, y| ev(i, y, &z0),
                    move |i, y| gr(i, y, &zg),
                    move |i, y| hs(i, y, &zh),
                )
            }
            (Some(gr), None) => {
                let zg = z.clone();
                VectorFieldFamily::order1(
                    self.state_dim,
                    self.driver_dim,
                    move |i, y| ev(i, y, &z0),
                    move |i, y| gr(i, y, &zg),
                )
            }
            _ => VectorFieldFamily::order0(self.state_dim, self.driver_dim, move |i, y| {
                ev(i, y, &z0)
            }),
        };
        if self.drift_sign < 0.0 {
            family.with_flipped_drift()
        } else {
            family
        }
    }

    /// Checks V_i(y + e₁, F⁻¹(z)) = V_i(y, z) (values and declared
    /// derivatives) on seeded random probes; returns the worst deviation,
    /// or an error naming the offending field and probe.
    pub fn check_periodicity(
        &self,
        space: &SuspensionSpace,
        seed: u64,
        probes: usize,
    ) -> Result<f64, FoliatedError> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for probe in 0..probes {
            let z = space.random_point(&mut rng);
            let zm = space.deck(&z, -1)?;
            let mut y = DVector::zeros(self.state_dim);
            y[0] = rng.random::<f64>();
            for i in 1..self.state_dim {
                y[i] = rng.sample(StandardNormal);
            }
            let mut shifted = y.clone();
            shifted[0] += 1.0;
            for field in 0..=self.driver_dim {
                let mut err =
                    ((self.eval)(field, &shifted, &zm) - (self.eval)(field, &y, &z)).amax();
                if let Some(gr) = &self.grad {
                    err = err.max((gr(field, &shifted, &zm) - gr(field, &y, &z)).amax());
                }
                if let Some(hs) = &self.hess {
                    for (a, b) in hs(field, &shifted, &zm).iter().zip(hs(field, &y, &z).iter()) {
                        err = err.max((a - b).amax());
                    }
                }
                worst = worst.max(err);
                if !(err <= PERIODICITY_TOL) {
                    return Err(FoliatedError::PeriodicityViolation { field, probe, err });
                }
            }
        }
        Ok(worst)
    }
}

/// One recorded crossing of an integer fiber value: the transversal
/// coordinate moves by exactly one deck step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub time: f64,
    /// +1 for an upward crossing (z ↦ F(z)), −1 for downward.
    pub direction: i8,
    pub z_before: TransversalPoint,
    pub z_after: TransversalPoint,
}

/// A foliated trajectory sampled at driver grid times, with the transition
/// record and optional leafwise Jacobians.
#[derive(Debug, Clone)]
pub struct FoliatedTrajectory {
    times: Vec<f64>,
    points: Vec<LeafPoint>,
    transitions: Vec<Transition>,
    jac: Option<JacobianFlow>,
    achieved_subdiv: usize,
}

impl FoliatedTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[LeafPoint] {
        &self.points
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn jacobians(&self) -> Option<&JacobianFlow> {
        self.jac.as_ref()
    }

    pub fn achieved_subdiv(&self) -> usize {
        self.achieved_subdiv
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn endpoint(&self) -> &LeafPoint {
        self.points.last().expect("trajectory has at least two samples")
    }

    /// The sample at an exactly matching time, if recorded.
    pub fn point_at(&self, t: f64) -> Option<&LeafPoint> {
        self.times.iter().position(|&u| u == t).map(|i| &self.points[i])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Chart {
    /// Fiber interval (−¼, ¾), interior integer 0.
    Low,
    /// Fiber interval (¼, 5⁄4), interior integer 1.
    High,
}

impl Chart {
    fn bounds(self) -> (f64, f64) {
        match self {
            Chart::Low => (-0.25, 0.75),
            Chart::High => (0.25, 1.25),
        }
    }

    fn canonical_boundary(self) -> f64 {
        match self {
            Chart::Low => 0.0,
            Chart::High => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Event {
    /// Crossing of the chart's interior integer fiber value.
    Canonical { up: bool },
    /// Exit through a chart edge: relabel, and at the outer edges deck.
    ChartExit { up: bool },
}

/// The largest double below 1, used to keep folded fiber coordinates inside
/// [0, 1) when the true value sits within one rounding step of 1.
fn below_one() -> f64 {
    f64::from_bits(1.0f64.to_bits() - 1)
}

/// Marching state: chart-local fiber coordinate plus two bookkeeping
/// layers. `z_int`/`w_int` track the deck power applied by outer chart
/// exits (the frozen field is V(·, z_int)); `z_canon`/`n_canon` track the
/// canonical winding ⌊y₁ + w_int⌋ used for emission, advanced exactly one
/// deck step per recorded transition.
struct ChartMarch<'a> {
    space: &'a SuspensionSpace,
    fields: &'a LeafwiseVectorFieldFamily,
    chart: Chart,
    aug: AugState,
    frozen: VectorFieldFamily,
    z_int: TransversalPoint,
    w_int: i64,
    z_canon: TransversalPoint,
    n_canon: i64,
    transitions: Vec<Transition>,
    events_seen: usize,
    jac_order: Option<usize>,
}

impl<'a> ChartMarch<'a> {
    fn start(
        space: &'a SuspensionSpace,
        m0: &LeafPoint,
        fields: &'a LeafwiseVectorFieldFamily,
        jac_order: Option<usize>,
    ) -> Self {
        let chart = if m0.y[0] < 0.75 { Chart::Low } else { Chart::High };
        let aug = AugState::identity(m0.y.clone(), jac_order.unwrap_or(0));
        let frozen = fields.freeze(&m0.z);
        ChartMarch {
            space,
            fields,
            chart,
            aug,
            frozen,
            z_int: m0.z.clone(),
            w_int: m0.winding,
            z_canon: m0.z.clone(),
            n_canon: m0.winding,
            transitions: Vec::new(),
            events_seen: 0,
            jac_order,
        }
    }

    /// Trial fiber coordinate after stepping over [u, τ] from the current
    /// state, computed by the same arithmetic `commit` will use, so the
    /// bisection predicts the committed side exactly.
    fn trial_y(&self, u: f64, tau: f64, path: &GridRoughPath) -> Result<f64, FoliatedError> {
        let inc = path.query_increment(u, tau)?;
        Ok(if self.jac_order.is_some() {
            davie_step_augmented(&self.aug, &inc, &self.frozen).x[0]
        } else {
            davie_step(&self.aug.x, &inc, &self.frozen)?[0]
        })
    }

    /// Advance the chart state over [u, v] (no event strictly inside).
    fn commit(&mut self, u: f64, v: f64, path: &GridRoughPath) -> Result<(), FoliatedError> {
        let inc = path.query_increment(u, v)?;
        if self.jac_order.is_some() {
            self.aug = davie_step_augmented(&self.aug, &inc, &self.frozen);
        } else {
            self.aug.x = davie_step(&self.aug.x, &inc, &self.frozen)?;
        }
        Ok(())
    }

    fn check_state(&self, t: f64, cfg: &SolveConfig) -> Result<(), FoliatedError> {
        if !self.aug.x.iter().all(|v| v.is_finite()) {
            return Err(SolveError::NonFiniteState { t }.into());
        }
        let norm = self.aug.x.norm();
        if norm > cfg.explosion_radius {
            return Err(SolveError::Explosion { t, norm, radius: cfg.explosion_radius }.into());
        }
        if self.jac_order.is_some() {
            let cond = self.aug.j1.norm() * self.aug.jinv.norm();
            if !cond.is_finite() || cond > JACOBIAN_COND_LIMIT {
                return Err(SolveError::IllConditionedJacobian {
                    t,
                    cond,
                    limit: JACOBIAN_COND_LIMIT,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Emitted canonical point for the current state. The shift
    /// w_int − n_canon is 0 or ±1 by the chart invariants, so the float
    /// addition incurs at most one rounding, absorbed by the edge guards.
    fn emit(&self) -> LeafPoint {
        let mut y = self.aug.x.clone();
        y[0] += (self.w_int - self.n_canon) as f64;
        if y[0] >= 1.0 {
            y[0] = below_one();
        } else if y[0] < 0.0 {
            y[0] = 0.0;
        }
        LeafPoint { y, z: self.z_canon.clone(), winding: self.n_canon }
    }

    fn record_transition(&mut self, t: f64, up: bool) -> Result<(), FoliatedError> {
        let dir: i64 = if up { 1 } else { -1 };
        let after = self.space.deck(&self.z_canon, dir)?;
        self.transitions.push(Transition {
            time: t,
            direction: dir as i8,
            z_before: self.z_canon.clone(),
            z_after: after.clone(),
        });
        self.z_canon = after;
        self.n_canon += dir;
        if self.transitions.len() > MAX_TRANSITIONS {
            return Err(FoliatedError::TooManyTransitions { max: MAX_TRANSITIONS, t });
        }
        Ok(())
    }

    fn apply_chart_exit(&mut self, up: bool) -> Result<(), FoliatedError> {
        match (self.chart, up) {
            // Inner edges: pure relabeling on the chart overlap.
            (Chart::Low, true) => self.chart = Chart::High,
            (Chart::High, false) => self.chart = Chart::Low,
            // Outer edges: apply the deck transformation.
            (Chart::High, true) => {
                self.aug.x[0] -= 1.0;
                self.z_int = self.space.deck(&self.z_int, 1)?;
                self.w_int += 1;
                self.chart = Chart::Low;
                self.frozen = self.fields.freeze(&self.z_int);
            }
            (Chart::Low, false) => {
                self.aug.x[0] += 1.0;
                self.z_int = self.space.deck(&self.z_int, -1)?;
                self.w_int -= 1;
                self.chart = Chart::High;
                self.frozen = self.fields.freeze(&self.z_int);
            }
        }
        Ok(())
    }

    /// Folds the state after an atomic whole-cell jump: events cannot be
    /// located inside such a cell, so any transitions stack at its end.
    fn renormalize(&mut self, t: f64) -> Result<(), FoliatedError> {
        let g = self.aug.x[0] + self.w_int as f64;
        let n_new = g.floor() as i64;
        while self.n_canon < n_new {
            self.record_transition(t, true)?;
        }
        while self.n_canon > n_new {
            self.record_transition(t, false)?;
        }
        if n_new != self.w_int {
            self.aug.x[0] = g - n_new as f64;
            if self.aug.x[0] >= 1.0 {
                self.aug.x[0] = below_one();
            }
            self.z_int = self.space.deck(&self.z_int, n_new - self.w_int)?;
            self.w_int = n_new;
            self.frozen = self.fields.freeze(&self.z_int);
        }
        self.chart = if self.aug.x[0] < 0.75 { Chart::Low } else { Chart::High };
        Ok(())
    }
}

/// Bisect for the earliest time in (u, v] at which the trial fiber
/// coordinate commits to the far side of `boundary`; `committed` decides
/// side membership. Trials are single steps from the state at `u`.
fn bisect_event(
    st: &ChartMarch,
    u: f64,
    v: f64,
    y_v: f64,
    boundary: f64,
    committed: impl Fn(f64) -> bool,
    path: &GridRoughPath,
) -> Result<f64, FoliatedError> {
    let mut lo = u;
    let mut hi = v;
    let mut y_hi = y_v;
    for _ in 0..BISECT_MAX {
        if (y_hi - boundary).abs() <= BOUNDARY_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let y_mid = st.trial_y(u, mid, path)?;
        if committed(y_mid) {
            hi = mid;
            y_hi = y_mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[allow(clippy::too_many_arguments)]
fn march_foliated(
    space: &SuspensionSpace,
    m0: &LeafPoint,
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    a: f64,
    b: f64,
    subdiv: usize,
    jac_order: Option<usize>,
) -> Result<FoliatedTrajectory, FoliatedError> {
    let legs = leg_boundaries(path, a, b)?;
    let mut st = ChartMarch::start(space, m0, fields, jac_order);
    let mut times = Vec::with_capacity(legs.len());
    let mut points = Vec::with_capacity(legs.len());
    type JacRecord = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Option<Vec<Vec<DMatrix<f64>>>>);
    let mut jrec: Option<JacRecord> =
        jac_order.map(|o| (Vec::new(), Vec::new(), (o == 2).then(Vec::new)));
    let mut record = |st: &ChartMarch, t: f64, times: &mut Vec<f64>, points: &mut Vec<LeafPoint>| {
        times.push(t);
        points.push(st.emit());
        if let Some((j1, jinv, j2)) = jrec.as_mut() {
            j1.push(st.aug.j1.clone());
            jinv.push(st.aug.jinv.clone());
            if let (Some(all), Some(h)) = (j2.as_mut(), st.aug.j2.as_ref()) {
                all.push(h.clone());
            }
        }
    };
    record(&st, legs[0], &mut times, &mut points);

    for leg in legs.windows(2) {
        let (ta, tb) = (leg[0], leg[1]);
        let atomic = path
            .cell_at(ta)
            .map(|c| path.kind(c) == CellKind::Atomic)
            .unwrap_or(false);
        let subs = leg_substeps(path, ta, tb, subdiv);
        for sub in subs.windows(2) {
            let (mut u, v) = (sub[0], sub[1]);
            if atomic {
                st.commit(u, v, path)?;
                st.check_state(v, cfg)?;
                st.renormalize(v)?;
                continue;
            }
            loop {
                let y_u = st.aug.x[0];
                let y_v = st.trial_y(u, v, path)?;
                let cb = st.chart.canonical_boundary();
                let (clo, chi) = st.chart.bounds();
                let mut events: Vec<(f64, f64, Event)> = Vec::new();
                if y_u < cb && y_v >= cb {
                    events.push((cb, f64::NAN, Event::Canonical { up: true }));
                }
                if y_u >= cb && y_v < cb {
                    events.push((cb, f64::NAN, Event::Canonical { up: false }));
                }
                if y_v >= chi {
                    events.push((chi, f64::NAN, Event::ChartExit { up: true }));
                }
                if y_v <= clo {
                    events.push((clo, f64::NAN, Event::ChartExit { up: false }));
                }
                if events.is_empty() {
                    st.commit(u, v, path)?;
                    st.check_state(v, cfg)?;
                    break;
                }
                st.events_seen += events.len();
                if st.events_seen > 8 * MAX_TRANSITIONS {
                    return Err(FoliatedError::TooManyTransitions {
                        max: MAX_TRANSITIONS,
                        t: u,
                    });
                }
                // Locate every straddled boundary; the earliest wins.
                for ev in events.iter_mut() {
                    let committed: Box<dyn Fn(f64) -> bool> = match ev.2 {
                        Event::Canonical { up: true } => Box::new(move |y| y >= cb),
                        Event::Canonical { up: false } => Box::new(move |y| y < cb),
                        Event::ChartExit { up: true } => Box::new(move |y| y >= chi),
                        Event::ChartExit { up: false } => Box::new(move |y| y <= clo),
                    };
                    ev.1 = bisect_event(&st, u, v, y_v, ev.0, committed, path)?;
                }
                let (_, tau, event) = *events
                    .iter()
                    .min_by(|p, q| p.1.total_cmp(&q.1))
                    .expect("nonempty event list");
                st.commit(u, tau, path)?;
                st.check_state(tau, cfg)?;
                match event {
                    Event::Canonical { up } => st.record_transition(tau, up)?,
                    Event::ChartExit { up } => st.apply_chart_exit(up)?,
                }
                if tau >= v {
                    break;
                }
                u = tau;
            }
        }
        record(&st, tb, &mut times, &mut points);
    }

    let jac = jrec.map(|(j1, jinv, j2)| JacobianFlow {
        order: jac_order.unwrap_or(1),
        j1,
        jinv,
        j2,
    });
    Ok(FoliatedTrajectory {
        times,
        points,
        transitions: st.transitions,
        jac,
        achieved_subdiv: subdiv,
    })
}

fn validate_foliated_inputs(
    space: &SuspensionSpace,
    m0: &LeafPoint,
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
) -> Result<(), FoliatedError> {
    cfg.validate()?;
    if fields.order() < 1 {
        return Err(SolveError::InsufficientOrder { need: 1, have: fields.order() }.into());
    }
    if fields.driver_dim() != path.dim() {
        return Err(FoliatedError::Config(format!(
            "field family drives {} coordinates but the path has {}",
            fields.driver_dim(),
            path.dim()
        )));
    }
    if fields.state_dim() != space.leaf_dim {
        return Err(FoliatedError::Config(format!(
            "field family lives on a fiber of dimension {} but the leaf dimension is {}",
            fields.state_dim(),
            space.leaf_dim
        )));
    }
    if m0.y.len() != space.leaf_dim {
        return Err(FoliatedError::Config("initial point dimension mismatch".into()));
    }
    if !space.contains(&m0.z) {
        return Err(FoliatedError::KindMismatch);
    }
    if !(0.0..1.0).contains(&m0.y[0]) {
        return Err(FoliatedError::BadFiber { y: m0.y[0] });
    }
    Ok(())
}

/// Solves the leafwise RDE from `m0` by chart continuation. The emitted
/// transversal coordinate is bit-identical between transitions, every
/// transition is a single exact deck step, and the winding record names
/// the plaque chain.
pub fn solve_rde_foliated(
    space: &SuspensionSpace,
    m0: &LeafPoint,
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    interval: Option<(f64, f64)>,
) -> Result<FoliatedTrajectory, FoliatedError> {
    validate_foliated_inputs(space, m0, path, fields, cfg)?;
    solve_foliated_impl(space, m0, path, fields, cfg, interval, None)
}

/// As [`solve_rde_foliated`], additionally carrying leafwise Jacobians of
/// the chart flow (deck transformations act as the identity on the fiber
/// derivative, so the Jacobian chains through transitions unchanged).
pub fn solve_foliated_with_jacobians(
    space: &SuspensionSpace,
    m0: &LeafPoint,
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    order: usize,
    interval: Option<(f64, f64)>,
) -> Result<FoliatedTrajectory, FoliatedError> {
    validate_foliated_inputs(space, m0, path, fields, cfg)?;
    if !(order == 1 || order == 2) {
        return Err(FoliatedError::Config(format!(
            "jacobian order must be 1 or 2, got {order}"
        )));
    }
    if fields.order() < 2 {
        return Err(SolveError::InsufficientOrder { need: 2, have: fields.order() }.into());
    }
    solve_foliated_impl(space, m0, path, fields, cfg, interval, Some(order))
}

fn solve_foliated_impl(
    space: &SuspensionSpace,
    m0: &LeafPoint,
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    interval: Option<(f64, f64)>,
    jac_order: Option<usize>,
) -> Result<FoliatedTrajectory, FoliatedError> {
    let (a, b) = interval.unwrap_or_else(|| path.span());
    let mut subdiv = cfg.base_subdiv.max(1);
    let mut current = march_foliated(space, m0, path, fields, cfg, a, b, subdiv, jac_order)?;
    if cfg.refine {
        for _ in 0..MAX_REFINE_DOUBLINGS {
            subdiv *= 2;
            let finer = march_foliated(space, m0, path, fields, cfg, a, b, subdiv, jac_order)?;
            let (pc, pf) = (current.endpoint(), finer.endpoint());
            let moved = if pc.winding == pf.winding && pc.z == pf.z {
                space.distance(pc, pf)?
            } else {
                f64::INFINITY
            };
            current = finer;
            if moved <= cfg.step_tol {
                break;
            }
        }
    }
    Ok(current)
}

/// Evaluates the inverse flow at time `s`: solves the drift-flipped
/// leafwise equation along the time-reversed driver, undoing deck steps
/// exactly.
pub fn foliated_inverse_point(
    space: &SuspensionSpace,
    m: &LeafPoint,
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    s: f64,
) -> Result<LeafPoint, FoliatedError> {
    let (lo, _) = path.span();
    if !(s > lo) {
        return Err(SolveError::BadInterval { a: lo, b: s }.into());
    }
    let clipped = path.restrict(lo, s)?;
    let based = if lo == 0.0 { clipped } else { time_shift(&clipped, -lo)? };
    let (_, span) = based.span();
    let reversed = time_reverse(&based, span)?;
    let back = solve_rde_foliated(space, m, &reversed, &fields.with_flipped_drift(), cfg, None)?;
    Ok(back.endpoint().clone())
}

/// Verifies leaf preservation on a solved trajectory: the sampled
/// transversal coordinate is bit-identical between transitions, every
/// transition is a single deck step, and windings are consistent. Returns
/// the winding history at transition times.
pub fn leaf_check(
    space: &SuspensionSpace,
    traj: &FoliatedTrajectory,
) -> Result<Vec<(f64, i64)>, FoliatedError> {
    if traj.points.is_empty() {
        return Ok(Vec::new());
    }
    for tr in &traj.transitions {
        if !matches!(tr.direction, 1 | -1)
            || space.deck(&tr.z_before, tr.direction as i64)? != tr.z_after
        {
            return Err(FoliatedError::BadTransition { t: tr.time });
        }
    }
    let mut history = Vec::with_capacity(traj.transitions.len());
    let mut z = traj.points[0].z.clone();
    let mut w = traj.points[0].winding;
    let mut next = 0usize;
    for (index, (t, pt)) in traj.times.iter().zip(&traj.points).enumerate() {
        // Transitions at or before a sample time act before the sample.
        while next < traj.transitions.len() && traj.transitions[next].time <= *t {
            let tr = &traj.transitions[next];
            if tr.z_before != z {
                return Err(FoliatedError::BadTransition { t: tr.time });
            }
            z = tr.z_after.clone();
            w += tr.direction as i64;
            history.push((tr.time, w));
            next += 1;
        }
        if pt.z != z || pt.winding != w {
            return Err(FoliatedError::LeafViolation { index, t: *t });
        }
    }
    // A transition after the last sample would be a bookkeeping error.
    if next != traj.transitions.len() {
        return Err(FoliatedError::BadTransition { t: traj.transitions[next].time });
    }
    Ok(history)
}

/// The images of a point grid at one time, with the smallest pairwise
/// distance among the images (an injectivity diagnostic).
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub time: f64,
    pub images: Vec<LeafPoint>,
    pub min_image_separation: f64,
}

/// Grid flow report: images per requested time, round-trip quality through
/// the inverse flow, and separation diagnostics.
#[derive(Debug, Clone)]
pub struct FlowReport {
    pub samples: Vec<FlowSample>,
    pub min_source_separation: f64,
    pub max_roundtrip_leaf_error: f64,
    pub roundtrip_transversal_exact: bool,
}

fn min_pairwise(space: &SuspensionSpace, pts: &[LeafPoint]) -> Result<f64, FoliatedError> {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.min(space.distance(&pts[i], &pts[j])?);
        }
    }
    Ok(best)
}

/// Solves from every grid point and evaluates the flow at the requested
/// times, checking each image against the inverse flow.
pub fn flow_grid(
    space: &SuspensionSpace,
    points: &[LeafPoint],
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    times: &[f64],
) -> Result<FlowReport, FoliatedError> {
    let (lo, hi) = path.span();
    if points.is_empty() || times.is_empty() {
        return Err(FoliatedError::Config("flow grid needs points and times".into()));
    }
    let mut samples = Vec::with_capacity(times.len());
    let mut max_err = 0.0f64;
    let mut z_exact = true;
    for &t in times {
        if !(t >= lo && t <= hi) {
            return Err(SolveError::BadInterval { a: lo, b: t }.into());
        }
        let mut images = Vec::with_capacity(points.len());
        for m in points {
            if t == lo {
                images.push(m.clone());
                continue;
            }
            let traj = solve_rde_foliated(space, m, path, fields, cfg, Some((lo, t)))?;
            let image = traj.endpoint().clone();
            let back = foliated_inverse_point(space, &image, path, fields, cfg, t)?;
            if back.z != m.z || back.winding != m.winding {
                z_exact = false;
            }
            max_err = max_err.max(space.distance(&back, m)?);
            images.push(image);
        }
        let sep = min_pairwise(space, &images)?;
        samples.push(FlowSample { time: t, images, min_image_separation: sep });
    }
    Ok(FlowReport {
        samples,
        min_source_separation: min_pairwise(space, points)?,
        max_roundtrip_leaf_error: max_err,
        roundtrip_transversal_exact: z_exact,
    })
}

/// A flow sample with the leafwise Jacobian blocks of each image.
#[derive(Debug, Clone)]
pub struct FlowJacobianSample {
    pub time: f64,
    pub images: Vec<LeafPoint>,
    pub j1: Vec<DMatrix<f64>>,
    pub jinv: Vec<DMatrix<f64>>,
    pub j2: Option<Vec<Vec<DMatrix<f64>>>>,
}

/// As [`flow_grid`], additionally carrying leafwise Jacobians per image and
/// rejecting singular ones (the flow is a leafwise diffeomorphism).
pub fn flow_jacobian_grid(
    space: &SuspensionSpace,
    points: &[LeafPoint],
    path: &GridRoughPath,
    fields: &LeafwiseVectorFieldFamily,
    cfg: &SolveConfig,
    times: &[f64],
    order: usize,
) -> Result<Vec<FlowJacobianSample>, FoliatedError> {
    let (lo, hi) = path.span();
    if points.is_empty() || times.is_empty() {
        return Err(FoliatedError::Config("flow grid needs points and times".into()));
    }
    let p = space.leaf_dim;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if !(t >= lo && t <= hi) {
            return Err(SolveError::BadInterval { a: lo, b: t }.into());
        }
        let mut images = Vec::with_capacity(points.len());
        let mut j1 = Vec::with_capacity(points.len());
        let mut jinv = Vec::with_capacity(points.len());
        let mut j2: Option<Vec<Vec<DMatrix<f64>>>> = (order == 2).then(Vec::new);
        for m in points {
            if t == lo {
                images.push(m.clone());
                j1.push(DMatrix::identity(p, p));
                jinv.push(DMatrix::identity(p, p));
                if let Some(all) = j2.as_mut() {
                    all.push(vec![DMatrix::zeros(p, p); p]);
                }
                continue;
            }
            let traj =
                solve_foliated_with_jacobians(space, m, path, fields, cfg, order, Some((lo, t)))?;
            let jac = traj.jacobians().expect("jacobians were requested");
            let jm = jac.j1.last().expect("at least one sample").clone();
            let det = jm.clone().lu().determinant();
            if !det.is_finite() || det.abs() < 1e-12 {
                return Err(FoliatedError::SingularJacobian { t });
            }
            images.push(traj.endpoint().clone());
            j1.push(jm);
            jinv.push(jac.jinv.last().expect("at least one sample").clone());
            if let Some(all) = j2.as_mut() {
                all.push(
                    jac.j2.as_ref().expect("order 2 requested").last().expect("sample").clone(),
                );
            }
        }
        out.push(FlowJacobianSample { time: t, images, j1, jinv, j2 });
    }
    Ok(out)
}
