//! Piecewise-linear drivers and their canonical level-2 lifts.
//!
//! A [`PiecewisePath`] is a continuous path in R^d, affine between knots and
//! starting at the zero vector. Its canonical lift assigns each segment the
//! increment `(Δw, ½ Δw ⊗ Δw)`, which satisfies the shuffle relation exactly,
//! so [`lift_piecewise_linear`] always produces a geometric
//! [`GridRoughPath`] with [`CellKind::Linear`] cells.
//!
//! Dyadic machinery: [`sample_brownian`] draws a Brownian path on the level-m
//! dyadic grid of `[0, T]` from a seeded generator, and [`dyadic_approx`]
//! coarsens any path to level m by linear interpolation. Knot times at every
//! level come from one shared formula, so the level-m knots are bitwise equal
//! to every second level-(m+1) knot; coarsening a sampled Brownian path keeps
//! the original sample values bit-for-bit. Runs are reproducible: one seed,
//! one path.
//!
//! [`CameronMartinPath`] couples a piecewise-linear path with its slope
//! energy `‖h‖² = Σ |Δh|²/Δt = ∫ |ḣ|² dt`, the quantity whose half is the
//! large-deviation rate of the small-noise limit.
//!
//! CSV interchange uses the header `t,w1,...,wd` and 17-significant-digit
//! scientific notation, so write → read is the identity on every f64 bit.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor_algebra::{CellKind, GridRoughPath, Increment, TensorError};

/// Deepest supported dyadic level (2^24 segments ≈ 16.8M knots).
pub const MAX_DYADIC_LEVEL: u32 = 24;

/// Errors for driver construction, sampling, and CSV interchange.
#[derive(Debug, Error)]
pub enum LiftError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("path needs at least two knots")]
    TooShort,
    #[error("knot times must be finite and strictly increasing (near index {index})")]
    BadTimes { index: usize },
    #[error("knot values must be finite with a common dimension >= 1 (near index {index})")]
    BadValues { index: usize },
    #[error("path must start at the zero vector")]
    NonZeroStart,
    #[error("operation requires the path domain to start at time 0, found {0}")]
    DomainNotAtZero(f64),
    #[error("dyadic level {0} exceeds the supported maximum {MAX_DYADIC_LEVEL}")]
    LevelTooDeep(u32),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("driver dimension must be >= 1")]
    ZeroDimension,
    #[error("time {t} outside the path domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A continuous piecewise-linear path in R^d starting at the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl PiecewisePath {
    /// Builds a path after validating: at least two knots, strictly
    /// increasing finite times, finite values of a common dimension, and an
    /// exactly-zero first value.
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self, LiftError> {
        if times.len() < 2 || values.len() < 2 {
            return Err(LiftError::TooShort);
        }
        if times.len() != values.len() {
            return Err(LiftError::BadValues { index: values.len().min(times.len()) });
        }
        for (i, pair) in times.windows(2).enumerate() {
            if !pair[0].is_finite() || !pair[1].is_finite() || pair[0] >= pair[1] {
                return Err(LiftError::BadTimes { index: i });
            }
        }
        let d = values[0].len();
        if d == 0 {
            return Err(LiftError::ZeroDimension);
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != d || !v.iter().all(|x| x.is_finite()) {
                return Err(LiftError::BadValues { index: i });
            }
        }
        if values[0].iter().any(|&x| x != 0.0) {
            return Err(LiftError::NonZeroStart);
        }
        Ok(PiecewisePath { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Number of linear segments.
    pub fn num_segments(&self) -> usize {
        self.times.len() - 1
    }

    /// First and last knot times.
    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().expect("path has knots"))
    }

    /// Value at `t` by linear interpolation; knot times return the stored
    /// value bit-for-bit.
    pub fn value_at(&self, t: f64) -> Result<DVector<f64>, LiftError> {
        let (lo, hi) = self.span();
        if !t.is_finite() || t < lo || t > hi {
            return Err(LiftError::OutOfDomain { t, lo, hi });
        }
        match self.times.binary_search_by(|x| x.partial_cmp(&t).expect("times are finite")) {
            Ok(i) => Ok(self.values[i].clone()),
            Err(i) => {
                // t lies strictly inside segment i-1.
                let (a, b) = (self.times[i - 1], self.times[i]);
                let f = (t - a) / (b - a);
                Ok(&self.values[i - 1] + f * (&self.values[i] - &self.values[i - 1]))
            }
        }
    }

    /// The reversed path `t ↦ w(T-t) - w(T)` on `[0, T]`; requires the
    /// domain to start at 0. Reversing twice returns the original values
    /// up to one rounding of each knot time and value.
    pub fn time_reversed(&self) -> Result<PiecewisePath, LiftError> {
        let (lo, hi) = self.span();
        if lo != 0.0 {
            return Err(LiftError::DomainNotAtZero(lo));
        }
        let n = self.times.len();
        let last = &self.values[n - 1];
        let times: Vec<f64> = (0..n).map(|i| hi - self.times[n - 1 - i]).collect();
        let values: Vec<DVector<f64>> = (0..n).map(|i| &self.values[n - 1 - i] - last).collect();
        PiecewisePath::new(times, values)
    }
}

/// Canonical level-2 lift: each segment becomes the geometric increment
/// `(Δw, ½ Δw ⊗ Δw)` on a [`CellKind::Linear`] cell.
pub fn lift_piecewise_linear(path: &PiecewisePath, alpha: f64) -> Result<GridRoughPath, TensorError> {
    let n = path.num_segments();
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let dw = &path.values[i + 1] - &path.values[i];
        let l2 = DMatrix::from_fn(dw.len(), dw.len(), |r, c| 0.5 * dw[r] * dw[c]);
        cells.push(Increment::new(dw, l2, path.times[i + 1] - path.times[i])?);
    }
    GridRoughPath::from_cells(path.times.clone(), cells, vec![CellKind::Linear; n], alpha, true)
}

/// Level-m dyadic knot times of `[0, horizon]`. One shared formula for all
/// levels: knot j at level m is bitwise equal to knot 2j at level m+1, the
/// first knot is exactly 0 and the last exactly `horizon`.
pub fn dyadic_times(horizon: f64, level: u32) -> Vec<f64> {
    let n = 1u64 << level;
    (0..=n)
        .map(|j| {
            if j == 0 {
                0.0
            } else if j == n {
                horizon
            } else {
                (j as f64 * horizon) / n as f64
            }
        })
        .collect()
}

/// Piecewise-linear interpolation of `path` on the level-m dyadic grid of
/// its domain `[0, T]`.
///
/// If `path` was produced by [`sample_brownian`] at level `M >= m` with the
/// same horizon, the output knots are a bitwise subset of the input knots
/// and the values are the original samples, bit-for-bit.
pub fn dyadic_approx(path: &PiecewisePath, level: u32) -> Result<PiecewisePath, LiftError> {
    if level > MAX_DYADIC_LEVEL {
        return Err(LiftError::LevelTooDeep(level));
    }
    let (lo, hi) = path.span();
    if lo != 0.0 {
        return Err(LiftError::DomainNotAtZero(lo));
    }
    let times = dyadic_times(hi, level);
    let values = times
        .iter()
        .map(|&t| path.value_at(t))
        .collect::<Result<Vec<_>, _>>()?;
    PiecewisePath::new(times, values)
}

/// Draws a d-dimensional Brownian path on the level-m dyadic grid of
/// `[0, horizon]` from `ChaCha8Rng::seed_from_u64(seed)`.
///
/// Increments are `sqrt(T/2^m) · z` with `z` standard normal, drawn
/// step-major then coordinate-minor, so the stream of draws (hence the whole
/// path) is a pure function of `(d, horizon, level, seed)`.
pub fn sample_brownian(d: usize, horizon: f64, level: u32, seed: u64) -> Result<PiecewisePath, LiftError> {
    if d == 0 {
        return Err(LiftError::ZeroDimension);
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(LiftError::BadHorizon(horizon));
    }
    if level > MAX_DYADIC_LEVEL {
        return Err(LiftError::LevelTooDeep(level));
    }
    let n = 1usize << level;
    let scale = (horizon / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n + 1);
    values.push(DVector::zeros(d));
    for _ in 0..n {
        let prev = values.last().expect("values is never empty");
        let mut next = prev.clone();
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            next[c] += scale * z;
        }
        values.push(next);
    }
    PiecewisePath::new(dyadic_times(horizon, level), values)
}

/// [`sample_brownian`] followed by the canonical lift.
pub fn brownian_rough_path(
    d: usize,
    horizon: f64,
    level: u32,
    seed: u64,
    alpha: f64,
) -> Result<GridRoughPath, LiftError> {
    let path = sample_brownian(d, horizon, level, seed)?;
    Ok(lift_piecewise_linear(&path, alpha)?)
}

/// A piecewise-linear path together with its slope energy
/// `‖h‖² = Σ |Δh|² / Δt` (finite by construction).
#[derive(Debug, Clone)]
pub struct CameronMartinPath {
    path: PiecewisePath,
    hnorm_sq: f64,
}

impl CameronMartinPath {
    pub fn new(path: PiecewisePath) -> Self {
        let mut hnorm_sq = 0.0;
        for i in 0..path.num_segments() {
            let dv = &path.values[i + 1] - &path.values[i];
            hnorm_sq += dv.norm_squared() / (path.times[i + 1] - path.times[i]);
        }
        CameronMartinPath { path, hnorm_sq }
    }

    pub fn path(&self) -> &PiecewisePath {
        &self.path
    }

    /// The squared norm `∫ |ḣ|² dt`.
    pub fn hnorm_sq(&self) -> f64 {
        self.hnorm_sq
    }

    /// The large-deviation rate `J(h) = ‖h‖² / 2`.
    pub fn rate(&self) -> f64 {
        0.5 * self.hnorm_sq
    }
}

/// Canonical lift of a finite-energy path (identical to lifting the
/// underlying piecewise-linear path; named for call sites that care about
/// the energy pairing).
pub fn cameron_martin_lift(h: &CameronMartinPath, alpha: f64) -> Result<GridRoughPath, TensorError> {
    lift_piecewise_linear(h.path(), alpha)
}

/// Formats one float with 17 significant digits, enough for bit-exact
/// round-trips through text.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `path` as CSV with header `t,w1,...,wd`. Every float uses
/// 17 significant digits, so [`read_path_csv`] reproduces the path
/// bit-for-bit.
pub fn write_path_csv<W: Write>(path: &PiecewisePath, mut out: W) -> Result<(), LiftError> {
    let d = path.dim();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=d).map(|c| format!("w{c}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (t, v) in path.times.iter().zip(&path.values) {
        let mut row = Vec::with_capacity(d + 1);
        row.push(fmt_f64(*t));
        for c in 0..d {
            row.push(fmt_f64(v[c]));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads the CSV format written by [`write_path_csv`], validating the header
/// shape and row arity; all [`PiecewisePath::new`] invariants are re-checked.
pub fn read_path_csv<R: Read>(input: R) -> Result<PiecewisePath, LiftError> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(LiftError::Csv { line: 1, msg: "empty input".into() })?;
    let header = header?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[0] != "t" {
        return Err(LiftError::Csv { line: 1, msg: format!("expected header t,w1,...,wd, got {header:?}") });
    }
    let d = cols.len() - 1;
    for (c, name) in cols.iter().skip(1).enumerate() {
        if *name != format!("w{}", c + 1) {
            return Err(LiftError::Csv { line: 1, msg: format!("column {} named {name:?}, expected w{}", c + 2, c + 1) });
        }
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != d + 1 {
            return Err(LiftError::Csv { line: line_no, msg: format!("expected {} fields, got {}", d + 1, fields.len()) });
        }
        let mut parsed = Vec::with_capacity(d + 1);
        for f in &fields {
            let x: f64 = f
                .parse()
                .map_err(|e| LiftError::Csv { line: line_no, msg: format!("bad float {f:?}: {e}") })?;
            parsed.push(x);
        }
        times.push(parsed[0]);
        values.push(DVector::from_vec(parsed[1..].to_vec()));
    }
    PiecewisePath::new(times, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_algebra::{holder_norms, rp_distance, time_reverse};

    const ALPHA: f64 = 0.4;

    fn wiggle_path() -> PiecewisePath {
        let times: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        let values: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| DVector::from_vec(vec![(3.1 * t).sin(), t * t - t, (2.0 * t).cos() - 1.0]))
            .collect();
        PiecewisePath::new(times, values).unwrap()
    }

    #[test]
    fn lift_is_geometric_and_chen_consistent() {
        let rp = lift_piecewise_linear(&wiggle_path(), ALPHA).unwrap();
        assert!(rp.is_geometric());
        assert!(rp.max_shuffle_residual() < 1e-14);
        assert!(rp.max_chen_residual() < 1e-14);
    }

    #[test]
    fn path_constructor_rejects_malformed_input() {
        assert!(matches!(
            PiecewisePath::new(vec![0.0], vec![DVector::zeros(1)]),
            Err(LiftError::TooShort)
        ));
        assert!(matches!(
            PiecewisePath::new(vec![0.0, 0.0], vec![DVector::zeros(1), DVector::zeros(1)]),
            Err(LiftError::BadTimes { .. })
        ));
        assert!(matches!(
            PiecewisePath::new(
                vec![0.0, 1.0],
                vec![DVector::from_vec(vec![0.5]), DVector::zeros(1)]
            ),
            Err(LiftError::NonZeroStart)
        ));
        assert!(matches!(
            PiecewisePath::new(
                vec![0.0, 1.0],
                vec![DVector::zeros(2), DVector::zeros(1)]
            ),
            Err(LiftError::BadValues { .. })
        ));
    }

    #[test]
    fn value_at_is_exact_on_knots_and_linear_between() {
        let p = wiggle_path();
        for (t, v) in p.times().iter().zip(p.values()) {
            assert_eq!(&p.value_at(*t).unwrap(), v);
        }
        let mid = p.value_at(0.0625).unwrap();
        let expect = 0.5 * (&p.values()[0] + &p.values()[1]);
        assert!((mid - expect).amax() < 1e-15);
        assert!(matches!(p.value_at(2.0), Err(LiftError::OutOfDomain { .. })));
    }

    #[test]
    fn dyadic_knots_nest_bitwise_across_levels() {
        for horizon in [1.0, 0.7, 3.25] {
            let coarse = dyadic_times(horizon, 5);
            let fine = dyadic_times(horizon, 6);
            for (j, t) in coarse.iter().enumerate() {
                assert_eq!(*t, fine[2 * j], "knot {j} at horizon {horizon}");
            }
        }
    }

    #[test]
    fn brownian_sampling_is_deterministic_and_seed_sensitive() {
        let a = sample_brownian(2, 1.0, 6, 42).unwrap();
        let b = sample_brownian(2, 1.0, 6, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_brownian(2, 1.0, 6, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dyadic_approx_of_a_brownian_sample_keeps_sample_values() {
        let w = sample_brownian(3, 0.7, 9, 7).unwrap();
        let coarse = dyadic_approx(&w, 6).unwrap();
        for (j, t) in coarse.times().iter().enumerate() {
            assert_eq!(*t, w.times()[8 * j]);
            assert_eq!(&coarse.values()[j], &w.values()[8 * j]);
        }
    }

    #[test]
    fn brownian_moments_match_theory() {
        // E |w_T|^2 = d T; with 4000 seeds the relative sampling error of
        // the mean is about 1.6%, so 5% is a three-sigma band.
        let (d, horizon) = (2, 1.0);
        let n_seeds = 4000;
        let mut sum_sq = 0.0;
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        let mut sum_ab = 0.0;
        for seed in 0..n_seeds {
            let w = sample_brownian(d, horizon, 4, 1_000 + seed).unwrap();
            let end = w.values().last().unwrap();
            sum_sq += end.norm_squared();
            // Disjoint increments of the first coordinate.
            let half = w.value_at(0.5).unwrap();
            let a = half[0];
            let b = end[0] - half[0];
            sum_a += a;
            sum_b += b;
            sum_ab += a * b;
        }
        let n = n_seeds as f64;
        let mean_sq = sum_sq / n;
        assert!(
            (mean_sq - d as f64 * horizon).abs() < 0.05 * d as f64 * horizon,
            "E|w_T|^2 = {mean_sq}, want ~{}",
            d as f64 * horizon
        );
        // Correlation of disjoint increments (each has variance T/2 = 0.5).
        let cov = sum_ab / n - (sum_a / n) * (sum_b / n);
        let corr = cov / 0.5;
        assert!(corr.abs() < 0.05, "increment correlation {corr}");
    }

    #[test]
    fn lift_commutes_with_time_reversal() {
        let w = sample_brownian(2, 1.0, 5, 11).unwrap();
        let lifted_then_reversed = time_reverse(&lift_piecewise_linear(&w, ALPHA).unwrap(), 1.0).unwrap();
        let reversed_then_lifted = lift_piecewise_linear(&w.time_reversed().unwrap(), ALPHA).unwrap();
        let dist = rp_distance(&lifted_then_reversed, &reversed_then_lifted).unwrap();
        assert!(dist < 1e-12, "commutation distance {dist}");
    }

    #[test]
    fn csv_roundtrip_is_bitwise() {
        let w = sample_brownian(3, 0.7, 5, 99).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&w, &mut buf).unwrap();
        let back = read_path_csv(buf.as_slice()).unwrap();
        assert_eq!(w, back);
        // A second write of the re-read path is byte-identical.
        let mut buf2 = Vec::new();
        write_path_csv(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn csv_rejects_bad_shapes() {
        assert!(matches!(
            read_path_csv("x,w1\n0,0\n1,1\n".as_bytes()),
            Err(LiftError::Csv { line: 1, .. })
        ));
        assert!(matches!(
            read_path_csv("t,w1,w3\n0,0,0\n1,1,1\n".as_bytes()),
            Err(LiftError::Csv { line: 1, .. })
        ));
        assert!(matches!(
            read_path_csv("t,w1\n0,0\n1\n".as_bytes()),
            Err(LiftError::Csv { line: 3, .. })
        ));
        assert!(matches!(
            read_path_csv("t,w1\n0,0\n1,abc\n".as_bytes()),
            Err(LiftError::Csv { line: 3, .. })
        ));
    }

    #[test]
    fn cameron_martin_energy_is_exact_on_dyadic_ramps() {
        // h(t) = t/2 on [0,1]: ‖h‖² = 1/4, rate 1/8; h(t) = 2t: ‖h‖² = 4, rate 2.
        let times = dyadic_times(1.0, 3);
        let half: Vec<DVector<f64>> = times.iter().map(|&t| DVector::from_vec(vec![0.5 * t])).collect();
        let double: Vec<DVector<f64>> = times.iter().map(|&t| DVector::from_vec(vec![2.0 * t])).collect();
        let h1 = CameronMartinPath::new(PiecewisePath::new(times.clone(), half).unwrap());
        let h2 = CameronMartinPath::new(PiecewisePath::new(times, double).unwrap());
        assert_eq!(h1.rate(), 0.125);
        assert_eq!(h2.rate(), 2.0);
    }

    #[test]
    fn cameron_martin_lift_matches_plain_lift() {
        let w = sample_brownian(2, 1.0, 4, 5).unwrap();
        let h = CameronMartinPath::new(w.clone());
        let a = cameron_martin_lift(&h, ALPHA).unwrap();
        let b = lift_piecewise_linear(&w, ALPHA).unwrap();
        assert_eq!(rp_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn holder_norms_are_stable_across_brownian_levels() {
        // Same sample viewed at levels 8 and 9: the grid-pair seminorms
        // should agree within 25%.
        let w = sample_brownian(2, 1.0, 9, 1).unwrap();
        let fine = lift_piecewise_linear(&w, ALPHA).unwrap();
        let coarse = lift_piecewise_linear(&dyadic_approx(&w, 8).unwrap(), ALPHA).unwrap();
        let a = holder_norms(&fine);
        let b = holder_norms(&coarse);
        let rel1 = (a.norm_level1 - b.norm_level1).abs() / a.norm_level1;
        let rel2 = (a.norm_level2 - b.norm_level2).abs() / a.norm_level2;
        assert!(rel1 < 0.25, "level-1 norm drift {rel1}");
        assert!(rel2 < 0.25, "level-2 norm drift {rel2}");
    }
}
