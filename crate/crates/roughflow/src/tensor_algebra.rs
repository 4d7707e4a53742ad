//! Grid-indexed level-2 rough paths.
//!
//! A level-2 rough path over a driver in R^d stores, for each interval of a
//! time grid, the pair of iterated integrals
//!
//! - level 1: `w1[s,t] ∈ R^d`, the plain increment, and
//! - level 2: `w2[s,t] ∈ R^{d×d}`, with `w2[j,k]` the integral of
//!   `dw^j ⊗ dw^k` over `s < u < v < t`.
//!
//! Consecutive intervals compose by the Chen identity
//!
//! ```text
//! w1[s,t] = w1[s,u] + w1[u,t]
//! w2[s,t] = w2[s,u] + w2[u,t] + w1[s,u] ⊗ w1[u,t]
//! ```
//!
//! and a *geometric* rough path additionally satisfies the shuffle relation
//! `w1^j w1^k = w2[j,k] + w2[k,j]` on every interval, which pins the
//! symmetric part of level 2 to `½ w1 ⊗ w1`.
//!
//! [`GridRoughPath`] keeps one [`Increment`] per grid cell plus cached
//! prefix increments from the left endpoint, so any increment between grid
//! times is reconstructed in O(d²) without walking the grid. Cells are either
//! [`CellKind::Linear`] (the driver moves along a straight segment, so
//! sub-cell increments are defined by scaling) or [`CellKind::Atomic`] (the
//! cell is the finest recorded resolution and sub-cell queries are refused).
//!
//! Norm conventions: level 1 uses the Euclidean norm, level 2 the Frobenius
//! norm. Hölder seminorms and distances maximise over pairs of grid times;
//! they are exact on the grid and a lower bound for the continuum supremum.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Residual tolerance (absolute plus relative) for the per-cell shuffle
/// check run by the constructors of geometric paths. Random piecewise-linear
/// lifts stay below 1e-15; 1e-10 leaves two decades of headroom for long
/// accumulations without masking genuine violations.
pub const SHUFFLE_TOL: f64 = 1e-10;

/// Tolerance for the linear-cell shape check `w2 = ½ w1 ⊗ w1`. Constructed
/// lifts satisfy it exactly; the tolerance only absorbs rounding from
/// arithmetic done by callers before construction.
pub const LINEAR_CELL_TOL: f64 = 1e-12;

/// Relative tolerance for agreement between a cell's recorded duration and
/// the spacing of the surrounding grid times.
pub const CELL_DT_TOL: f64 = 1e-9;

/// Errors for rough-path construction and queries.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("alpha must lie in (1/3, 1/2), got {0}")]
    InvalidAlpha(f64),
    #[error("grid times must be finite and strictly increasing (violation near index {index})")]
    BadGrid { index: usize },
    #[error("grid must have at least one cell")]
    EmptyGrid,
    #[error("cell {cell} over [{start}, {end}] is atomic; sub-cell increments are not defined")]
    AtomicInterior { cell: usize, start: f64, end: f64 },
    #[error("query [{s}, {t}] is reversed or outside the grid span [{lo}, {hi}]")]
    QueryOutOfRange { s: f64, t: f64, lo: f64, hi: f64 },
    #[error("cell {cell} is declared linear but deviates from w2 = \u{00bd} w1\u{2297}w1 by {residual:.3e}")]
    NotLinearCell { cell: usize, residual: f64 },
    #[error("cell {cell} violates the shuffle relation by {residual:.3e}; path is not geometric")]
    NotGeometric { cell: usize, residual: f64 },
    #[error("cell {cell} duration {cell_dt} disagrees with grid spacing {grid_dt}")]
    CellDurationMismatch { cell: usize, cell_dt: f64, grid_dt: f64 },
    #[error("shuffle residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    ShuffleViolation { residual: f64, tol: f64 },
    #[error("Hölder exponents differ ({0} vs {1}); distance undefined")]
    AlphaMismatch(f64, f64),
    #[error("paths share fewer than two grid times; distance undefined")]
    NoCommonGrid,
    #[error("path must span [0, {expected}] exactly, found [{lo}, {hi}]")]
    BadHorizon { expected: f64, lo: f64, hi: f64 },
}

/// How a grid cell may be subdivided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// The driver is affine across the cell; sub-cell increments follow by
    /// scaling (`w1` linearly, `w2 = ½ w1 ⊗ w1` on the sub-interval).
    Linear,
    /// The cell is the finest recorded resolution; interior queries error.
    Atomic,
}

/// One interval's worth of rough-path data: `(w1, w2)` plus the duration.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    /// Level-1 increment in R^d.
    pub level1: DVector<f64>,
    /// Level-2 iterated integral in R^{d×d}, indexed `[first, second]`.
    pub level2: DMatrix<f64>,
    /// Interval length `t - s` (nonnegative).
    pub dt: f64,
}

impl Increment {
    /// The zero increment in dimension `d` (neutral element for
    /// [`chen_combine`]).
    pub fn zero(d: usize) -> Self {
        Increment {
            level1: DVector::zeros(d),
            level2: DMatrix::zeros(d, d),
            dt: 0.0,
        }
    }

    /// Builds an increment after validating shapes and finiteness.
    pub fn new(level1: DVector<f64>, level2: DMatrix<f64>, dt: f64) -> Result<Self, TensorError> {
        let d = level1.len();
        if d == 0 {
            return Err(TensorError::DimensionMismatch { expected: 1, got: 0 });
        }
        if level2.nrows() != d || level2.ncols() != d {
            return Err(TensorError::DimensionMismatch { expected: d, got: level2.nrows().max(level2.ncols()) });
        }
        if !level1.iter().all(|x| x.is_finite()) || !level2.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { context: "increment data" });
        }
        if !dt.is_finite() || dt < 0.0 {
            return Err(TensorError::NonFinite { context: "increment duration" });
        }
        Ok(Increment { level1, level2, dt })
    }

    /// Driver dimension d.
    pub fn dim(&self) -> usize {
        self.level1.len()
    }

    /// Largest normalised deviation from the shuffle relation,
    /// `max_{j,k} |w1^j w1^k - w2[j,k] - w2[k,j]| / (1 + |w1^j w1^k|)`.
    pub fn shuffle_residual(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for j in 0..d {
            for k in 0..d {
                let prod = self.level1[j] * self.level1[k];
                let res = (prod - self.level2[(j, k)] - self.level2[(k, j)]).abs() / (1.0 + prod.abs());
                worst = worst.max(res);
            }
        }
        worst
    }

    /// The increment of the time-reversed path over the mirrored interval:
    /// level 1 negated, level 2 transposed, duration unchanged. Applying it
    /// twice returns the original bit-for-bit.
    pub fn reversed(&self) -> Increment {
        Increment {
            level1: -&self.level1,
            level2: self.level2.transpose(),
            dt: self.dt,
        }
    }

    /// Dilation by `eps`: level 1 scales linearly, level 2 quadratically.
    pub fn scaled(&self, eps: f64) -> Increment {
        Increment {
            level1: eps * &self.level1,
            level2: (eps * eps) * &self.level2,
            dt: self.dt,
        }
    }
}

/// Outer product `a ⊗ b` with `(a ⊗ b)[j,k] = a_j b_k`.
fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |r, c| a[r] * b[c])
}

/// Chen composition of adjacent increments:
/// `w1 = a1 + b1`, `w2 = a2 + b2 + a1 ⊗ b1`, durations add.
pub fn chen_combine(left: &Increment, right: &Increment) -> Result<Increment, TensorError> {
    let d = left.dim();
    if right.dim() != d {
        return Err(TensorError::DimensionMismatch { expected: d, got: right.dim() });
    }
    Ok(Increment {
        level1: &left.level1 + &right.level1,
        level2: &left.level2 + &right.level2 + outer(&left.level1, &right.level1),
        dt: left.dt + right.dt,
    })
}

/// Checks the shuffle relation on one increment against `tol`
/// (absolute-plus-relative, see [`Increment::shuffle_residual`]).
pub fn check_shuffle(inc: &Increment, tol: f64) -> Result<(), TensorError> {
    let residual = inc.shuffle_residual();
    if residual <= tol {
        Ok(())
    } else {
        Err(TensorError::ShuffleViolation { residual, tol })
    }
}

/// Hölder seminorms of a rough path at exponent `alpha`, maximised over all
/// pairs of grid times: level i is `sup |w^i[s,t]| / (t-s)^{i·alpha}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderReport {
    pub alpha: f64,
    /// `sup |w1[s,t]| / (t-s)^alpha` (Euclidean norm).
    pub norm_level1: f64,
    /// `sup |w2[s,t]| / (t-s)^{2 alpha}` (Frobenius norm).
    pub norm_level2: f64,
}

impl HolderReport {
    /// The larger of the two seminorms (the rough-path norm).
    pub fn max(&self) -> f64 {
        self.norm_level1.max(self.norm_level2)
    }
}

/// A level-2 rough path recorded on a strictly increasing time grid.
///
/// Prefix increments from the left endpoint are cached at construction, so
/// [`GridRoughPath::grid_increment`] and [`GridRoughPath::query_increment`]
/// cost O(d²) regardless of grid size.
#[derive(Debug, Clone)]
pub struct GridRoughPath {
    times: Vec<f64>,
    cells: Vec<Increment>,
    kinds: Vec<CellKind>,
    alpha: f64,
    geometric: bool,
    /// prefix[i] = increment over [times[0], times[i]]; prefix[0] = 0.
    prefix: Vec<Increment>,
}

impl GridRoughPath {
    /// Builds a rough path from per-cell increments.
    ///
    /// Validates: at least one cell, strictly increasing finite times,
    /// consistent dimensions, per-cell durations matching the grid (the
    /// stored duration is then snapped to the exact grid spacing), `alpha`
    /// in (1/3, 1/2), the linear-cell shape on every [`CellKind::Linear`]
    /// cell, and the shuffle relation on every cell when `geometric` is set.
    pub fn from_cells(
        times: Vec<f64>,
        cells: Vec<Increment>,
        kinds: Vec<CellKind>,
        alpha: f64,
        geometric: bool,
    ) -> Result<Self, TensorError> {
        if cells.is_empty() {
            return Err(TensorError::EmptyGrid);
        }
        if times.len() != cells.len() + 1 || kinds.len() != cells.len() {
            return Err(TensorError::DimensionMismatch { expected: cells.len() + 1, got: times.len() });
        }
        if !(alpha > 1.0 / 3.0 && alpha < 0.5) {
            return Err(TensorError::InvalidAlpha(alpha));
        }
        for (i, pair) in times.windows(2).enumerate() {
            if !pair[0].is_finite() || !pair[1].is_finite() || pair[0] >= pair[1] {
                return Err(TensorError::BadGrid { index: i });
            }
        }
        let d = cells[0].dim();
        let mut cells = cells;
        for (i, cell) in cells.iter_mut().enumerate() {
            if cell.dim() != d {
                return Err(TensorError::DimensionMismatch { expected: d, got: cell.dim() });
            }
            let grid_dt = times[i + 1] - times[i];
            if (cell.dt - grid_dt).abs() > CELL_DT_TOL * grid_dt.max(1.0) {
                return Err(TensorError::CellDurationMismatch { cell: i, cell_dt: cell.dt, grid_dt });
            }
            cell.dt = grid_dt;
            if kinds[i] == CellKind::Linear {
                let mut residual = 0.0f64;
                for j in 0..d {
                    for k in 0..d {
                        let want = 0.5 * cell.level1[j] * cell.level1[k];
                        let dev = (cell.level2[(j, k)] - want).abs() / (1.0 + want.abs());
                        residual = residual.max(dev);
                    }
                }
                if residual > LINEAR_CELL_TOL {
                    return Err(TensorError::NotLinearCell { cell: i, residual });
                }
            }
            if geometric {
                let residual = cell.shuffle_residual();
                if residual > SHUFFLE_TOL {
                    return Err(TensorError::NotGeometric { cell: i, residual });
                }
            }
        }
        let mut prefix = Vec::with_capacity(cells.len() + 1);
        prefix.push(Increment::zero(d));
        for cell in &cells {
            let last = prefix.last().expect("prefix is never empty");
            prefix.push(chen_combine(last, cell)?);
        }
        Ok(GridRoughPath { times, cells, kinds, alpha, geometric, prefix })
    }

    /// Grid times (length = number of cells + 1).
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of grid cells.
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Driver dimension d.
    pub fn dim(&self) -> usize {
        self.cells[0].dim()
    }

    /// Hölder exponent the path was built with.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Whether the shuffle relation is enforced on every cell.
    pub fn is_geometric(&self) -> bool {
        self.geometric
    }

    /// First and last grid times.
    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().expect("grid has times"))
    }

    /// The recorded increment of cell `i` (no reconstruction).
    pub fn cell(&self, i: usize) -> &Increment {
        &self.cells[i]
    }

    /// The kind of cell `i`.
    pub fn kind(&self, i: usize) -> CellKind {
        self.kinds[i]
    }

    /// Increment between grid indices `i <= j`, reconstructed from cached
    /// prefixes in O(d²).
    pub fn grid_increment(&self, i: usize, j: usize) -> Increment {
        assert!(i <= j && j < self.times.len(), "grid indices out of range");
        let (pi, pj) = (&self.prefix[i], &self.prefix[j]);
        let l1 = &pj.level1 - &pi.level1;
        let l2 = &pj.level2 - &pi.level2 - outer(&pi.level1, &l1);
        Increment { level1: l1, level2: l2, dt: self.times[j] - self.times[i] }
    }

    /// Index of the cell whose half-open span `[t_i, t_{i+1})` contains `s`
    /// (callers guarantee `times[0] <= s < times[last]`).
    fn cell_floor(&self, s: f64) -> usize {
        let k = self.times.partition_point(|&x| x <= s);
        k - 1
    }

    /// Index of the cell whose half-open span `[t_i, t_{i+1})` contains `t`,
    /// or `None` outside `[t_0, t_last)`.
    pub fn cell_at(&self, t: f64) -> Option<usize> {
        let (lo, hi) = self.span();
        if !t.is_finite() || t < lo || t >= hi {
            return None;
        }
        Some(self.cell_floor(t))
    }

    /// Sub-interval `[u, v]` of cell `cell`; `u == v` allowed.
    fn partial(&self, cell: usize, u: f64, v: f64) -> Result<Increment, TensorError> {
        if u == v {
            return Ok(Increment { dt: 0.0, ..Increment::zero(self.dim()) });
        }
        let (a, b) = (self.times[cell], self.times[cell + 1]);
        if u == a && v == b {
            return Ok(self.cells[cell].clone());
        }
        if self.kinds[cell] == CellKind::Atomic {
            return Err(TensorError::AtomicInterior { cell, start: a, end: b });
        }
        let f = (v - u) / (b - a);
        let l1 = f * &self.cells[cell].level1;
        let l2 = 0.5 * outer(&l1, &l1);
        Ok(Increment { level1: l1, level2: l2, dt: v - u })
    }

    /// Increment over an arbitrary `[s, t]` inside the grid span.
    ///
    /// Grid-aligned queries reproduce recorded data exactly; queries with
    /// endpoints inside [`CellKind::Linear`] cells use the linear sub-cell
    /// rule; endpoints strictly inside an atomic cell are refused with
    /// [`TensorError::AtomicInterior`].
    pub fn query_increment(&self, s: f64, t: f64) -> Result<Increment, TensorError> {
        let (lo, hi) = self.span();
        if !s.is_finite() || !t.is_finite() || s > t || s < lo || t > hi {
            return Err(TensorError::QueryOutOfRange { s, t, lo, hi });
        }
        if s == t {
            return Ok(Increment::zero(self.dim()));
        }
        let is = self.cell_floor(s);
        // Smallest index j with times[j] >= t.
        let jt = self.times.partition_point(|&x| x < t);
        if jt <= is + 1 {
            return self.partial(is, s, t);
        }
        let left = self.partial(is, s, self.times[is + 1])?;
        let mid = self.grid_increment(is + 1, jt - 1);
        let right = self.partial(jt - 1, self.times[jt - 1], t)?;
        chen_combine(&chen_combine(&left, &mid)?, &right)
    }

    /// Restriction to `[a, b]` (endpoints may sit inside linear cells).
    /// The restricted grid keeps every original grid time in `(a, b)`; cells
    /// that survive whole keep their kind, trimmed pieces become linear.
    pub fn restrict(&self, a: f64, b: f64) -> Result<GridRoughPath, TensorError> {
        let (lo, hi) = self.span();
        if !(a >= lo && b <= hi && a < b) {
            return Err(TensorError::QueryOutOfRange { s: a, t: b, lo, hi });
        }
        let mut times = Vec::new();
        times.push(a);
        for &t in &self.times {
            if t > a && t < b {
                times.push(t);
            }
        }
        times.push(b);
        let mut cells = Vec::with_capacity(times.len() - 1);
        let mut kinds = Vec::with_capacity(times.len() - 1);
        for w in times.windows(2) {
            cells.push(self.query_increment(w[0], w[1])?);
            let c = self.cell_floor(w[0]);
            let whole = self.times[c] == w[0] && self.times[c + 1] == w[1];
            kinds.push(if whole { self.kinds[c] } else { CellKind::Linear });
        }
        GridRoughPath::from_cells(times, cells, kinds, self.alpha, self.geometric)
    }

    /// The same data with every cell marked atomic, i.e. the path viewed at
    /// its own finest resolution.
    pub fn atomic_view(&self) -> GridRoughPath {
        let mut out = self.clone();
        for k in &mut out.kinds {
            *k = CellKind::Atomic;
        }
        out
    }

    /// Largest normalised Chen residual over all grid triples `i < j < k`:
    /// componentwise deviation of `chen(w[i,j], w[j,k])` from `w[i,k]`,
    /// scaled by `1 + |w[i,k]|`. O(n³ d²): an audit for tests, not a hot path.
    pub fn max_chen_residual(&self) -> f64 {
        let n = self.times.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let left = self.grid_increment(i, j);
                for k in j + 1..n {
                    let right = self.grid_increment(j, k);
                    let whole = self.grid_increment(i, k);
                    let composed = chen_combine(&left, &right).expect("dimensions agree");
                    let scale1 = 1.0 + whole.level1.amax();
                    let scale2 = 1.0 + whole.level2.amax();
                    let r1 = (&composed.level1 - &whole.level1).amax() / scale1;
                    let r2 = (&composed.level2 - &whole.level2).amax() / scale2;
                    worst = worst.max(r1).max(r2);
                }
            }
        }
        worst
    }

    /// Largest shuffle residual over all pairs of grid times. O(n² d²).
    pub fn max_shuffle_residual(&self) -> f64 {
        let n = self.times.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max(self.grid_increment(i, j).shuffle_residual());
            }
        }
        worst
    }
}

/// Hölder seminorms over all pairs of grid times at the path's exponent.
pub fn holder_norms(path: &GridRoughPath) -> HolderReport {
    let alpha = path.alpha;
    let n = path.times.len();
    let d = path.dim();
    let mut n1 = 0.0f64;
    let mut n2 = 0.0f64;
    for i in 0..n {
        let pi = &path.prefix[i];
        for j in i + 1..n {
            let pj = &path.prefix[j];
            let dt = path.times[j] - path.times[i];
            let mut s1 = 0.0f64;
            for c in 0..d {
                let x = pj.level1[c] - pi.level1[c];
                s1 += x * x;
            }
            let mut s2 = 0.0f64;
            for r in 0..d {
                let ar = pi.level1[r];
                for c in 0..d {
                    let x = pj.level2[(r, c)] - pi.level2[(r, c)] - ar * (pj.level1[c] - pi.level1[c]);
                    s2 += x * x;
                }
            }
            n1 = n1.max(s1.sqrt() / dt.powf(alpha));
            n2 = n2.max(s2.sqrt() / dt.powf(2.0 * alpha));
        }
    }
    HolderReport { alpha, norm_level1: n1, norm_level2: n2 }
}

/// Inhomogeneous rough-path distance at the common exponent:
/// `max_i sup |w^i[s,t] - v^i[s,t]| / (t-s)^{i·alpha}`, the supremum running
/// over all pairs of grid times the two paths share exactly.
///
/// Errors if dimensions or exponents differ, or fewer than two grid times
/// coincide.
pub fn rp_distance(a: &GridRoughPath, b: &GridRoughPath) -> Result<f64, TensorError> {
    if a.dim() != b.dim() {
        return Err(TensorError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    // Exponents must agree exactly; distances at mixed exponents are
    // meaningless.
    if a.alpha != b.alpha {
        return Err(TensorError::AlphaMismatch(a.alpha, b.alpha));
    }
    let alpha = a.alpha;
    let d = a.dim();
    // Merge-walk both grids keeping exactly matching times.
    let mut ia = 0;
    let mut ib = 0;
    let mut common: Vec<(usize, usize)> = Vec::new();
    while ia < a.times.len() && ib < b.times.len() {
        let (ta, tb) = (a.times[ia], b.times[ib]);
        if ta == tb {
            common.push((ia, ib));
            ia += 1;
            ib += 1;
        } else if ta < tb {
            ia += 1;
        } else {
            ib += 1;
        }
    }
    if common.len() < 2 {
        return Err(TensorError::NoCommonGrid);
    }
    let mut dist = 0.0f64;
    for u in 0..common.len() {
        let (ua, ub) = common[u];
        let (pau, pbu) = (&a.prefix[ua], &b.prefix[ub]);
        for v in u + 1..common.len() {
            let (va, vb) = common[v];
            let (pav, pbv) = (&a.prefix[va], &b.prefix[vb]);
            let dt = a.times[va] - a.times[ua];
            let mut s1 = 0.0f64;
            for c in 0..d {
                let x = (pav.level1[c] - pau.level1[c]) - (pbv.level1[c] - pbu.level1[c]);
                s1 += x * x;
            }
            let mut s2 = 0.0f64;
            for r in 0..d {
                let (ar, br) = (pau.level1[r], pbu.level1[r]);
                for c in 0..d {
                    let xa = pav.level2[(r, c)] - pau.level2[(r, c)] - ar * (pav.level1[c] - pau.level1[c]);
                    let xb = pbv.level2[(r, c)] - pbu.level2[(r, c)] - br * (pbv.level1[c] - pbu.level1[c]);
                    let x = xa - xb;
                    s2 += x * x;
                }
            }
            dist = dist.max(s1.sqrt() / dt.powf(alpha)).max(s2.sqrt() / dt.powf(2.0 * alpha));
        }
    }
    Ok(dist)
}

/// Time reversal over `[0, T]`: the reversed path has increments
/// `w1 ↦ -w1` and `w2 ↦ w2ᵀ` over mirrored intervals. Applying it twice is
/// the identity on increments bit-for-bit; reversal preserves Hölder norms,
/// geometricity and cell kinds.
///
/// The grid must span exactly `[0, T]`.
pub fn time_reverse(path: &GridRoughPath, horizon: f64) -> Result<GridRoughPath, TensorError> {
    let (lo, hi) = path.span();
    if lo != 0.0 || hi != horizon {
        return Err(TensorError::BadHorizon { expected: horizon, lo, hi });
    }
    let n = path.cells.len();
    let times: Vec<f64> = (0..=n).map(|i| horizon - path.times[n - i]).collect();
    let cells: Vec<Increment> = (0..n).map(|i| path.cells[n - 1 - i].reversed()).collect();
    let kinds: Vec<CellKind> = (0..n).map(|i| path.kinds[n - 1 - i]).collect();
    GridRoughPath::from_cells(times, cells, kinds, path.alpha, path.geometric)
}

/// Dilation by `eps`: level 1 scales by `eps`, level 2 by `eps²`, the grid
/// is untouched. `eps = 0` yields the zero rough path on the same grid.
pub fn dilate(path: &GridRoughPath, eps: f64) -> Result<GridRoughPath, TensorError> {
    if !eps.is_finite() {
        return Err(TensorError::NonFinite { context: "dilation factor" });
    }
    let cells: Vec<Increment> = path.cells.iter().map(|c| c.scaled(eps)).collect();
    GridRoughPath::from_cells(path.times.clone(), cells, path.kinds.clone(), path.alpha, path.geometric)
}

/// Shifts the whole grid by `delta`; increments are untouched, so every
/// two-parameter quantity (norms, distances) is invariant.
pub fn time_shift(path: &GridRoughPath, delta: f64) -> Result<GridRoughPath, TensorError> {
    if !delta.is_finite() {
        return Err(TensorError::NonFinite { context: "time shift" });
    }
    let times: Vec<f64> = path.times.iter().map(|t| t + delta).collect();
    GridRoughPath::from_cells(times, path.cells.clone(), path.kinds.clone(), path.alpha, path.geometric)
}
