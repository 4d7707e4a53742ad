//! The three reproducible experiments behind the CLI.
//!
//! Each driver is a pure function of an [`ExperimentConfig`] (plus, where
//! relevant, a Cameron-Martin path): no clocks, no global state, and all
//! replica seeds derive from the base seed, so two runs of the same config
//! agree bit for bit. Monte-Carlo loops visit replicas in index order; the
//! fan-out could run on independent workers and be re-sorted by replica
//! index without changing a single output byte.

use nalgebra::DVector;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::suites::{
    base_point, flat_family, invariant_leafwise_family, make_space, translation_leafwise_family,
    zero_leafwise_family, FieldSuite,
};
use super::{HarnessError, SCHEMA_VERSION};
use crate::foliated::{
    foliated_inverse_point, solve_rde_foliated, FoliatedTrajectory, LeafPoint, SuspensionSpace,
};
use crate::rde_solver::{solve_rde, SolveConfig, Trajectory, VectorFieldFamily};
use crate::rough_lift::{
    brownian_rough_path, cameron_martin_lift, dyadic_approx, dyadic_times, lift_piecewise_linear,
    sample_brownian, CameronMartinPath, PiecewisePath,
};
use crate::tensor_algebra::{dilate, rp_distance, GridRoughPath};

/// Finest dyadic level the Wong-Zakai ladder accepts (2^16 cells).
pub const MAX_WZ_LEVEL: u32 = 16;
/// Replicas per epsilon in the concentration experiment.
pub const LDP_SEEDS: usize = 400;
/// Dyadic level of the concentration replicas.
pub const LDP_LEVEL: u32 = 8;
/// Deviation threshold defining an exceedance.
pub const LDP_DELTA: f64 = 0.5;
/// Brownian replicas in the support reachability scan.
pub const SUPPORT_SEEDS: usize = 32;
/// Runge-Kutta substeps per Cameron-Martin segment in the ODE oracle.
const RK4_SUBSTEPS: usize = 256;

/// Distinct, reproducible seed for replica `k` of a sweep.
fn replica_seed(base: u64, k: u64) -> u64 {
    base ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One Davie step per driver cell, no refinement: the solution at the
/// driver's own resolution, which is what level-by-level comparisons and
/// Monte-Carlo sweeps want.
fn level_solve_config(alpha: f64) -> SolveConfig {
    SolveConfig {
        alpha,
        base_subdiv: 1,
        refine: false,
        step_tol: 1e-9,
        explosion_radius: 1e6,
    }
}

/// Refining configuration for skeleton solves, where the driver is smooth
/// and the contract is a 1e-6 match against an independent integrator.
fn skeleton_solve_config(alpha: f64) -> SolveConfig {
    SolveConfig {
        alpha,
        base_subdiv: 4,
        refine: true,
        step_tol: 1e-9,
        explosion_radius: 1e6,
    }
}

/// Row of a Wong-Zakai table: level `m` against level `m + 1`.
/// Every column is a sup of norms, hence nonnegative.
#[derive(Debug, Clone, Serialize)]
pub struct WongZakaiRow {
    /// Coarser level of the pair.
    pub m: u32,
    /// Inhomogeneous rough-path distance d_α(W(m), W(m+1)) over shared
    /// grid times.
    pub driver_dalpha: f64,
    /// Sup over shared sample times of the flat solution gap.
    pub flat_sup: f64,
    /// Sup over shared sample times of the foliated solution gap, in the
    /// quotient metric of the suspension space.
    pub foliated_sup: f64,
    /// Distance from the initial point after solving to T at level `m` and
    /// inverting back.
    pub roundtrip: f64,
}

/// Wong-Zakai convergence table for one Brownian sample.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTable {
    pub schema_version: u32,
    pub seed: u64,
    pub rows: Vec<WongZakaiRow>,
}

/// Solves along dyadic refinements W(m_lo), ..., W(m_hi) of one Brownian
/// sample, on ℝ^p with the configured suite and on the configured
/// suspension space with the invariant leafwise family (the zero suite
/// selects the zero leafwise family), and tabulates consecutive-level gaps.
/// The columns decrease as m grows (a trend, not a rate): that is the
/// Wong-Zakai picture at the driver's own resolution.
pub fn wong_zakai_experiment(cfg: &ExperimentConfig) -> Result<ConvergenceTable, HarnessError> {
    cfg.validate()?;
    if cfg.m_hi > MAX_WZ_LEVEL {
        return Err(HarnessError::Config(format!(
            "m_hi = {} exceeds the supported maximum {MAX_WZ_LEVEL}",
            cfg.m_hi
        )));
    }
    if cfg.m_lo >= cfg.m_hi {
        return Err(HarnessError::Config(format!(
            "the table needs m_lo < m_hi, got {}..{}",
            cfg.m_lo, cfg.m_hi
        )));
    }
    let base = sample_brownian(cfg.d, cfg.horizon, cfg.m_hi, cfg.seed)?;
    let fields = flat_family(cfg.field_suite, cfg.p, cfg.d)?;
    let space = make_space(cfg.transversal, cfg.p)?;
    let leafwise = match cfg.field_suite {
        FieldSuite::Zero => zero_leafwise_family(&space, cfg.d),
        _ => invariant_leafwise_family(cfg.transversal, &space, cfg.d)?,
    };
    let x0 = DVector::from_element(cfg.p, 0.5);
    let m0 = LeafPoint::new(
        DVector::from_element(cfg.p, 0.25),
        base_point(cfg.transversal),
    )?;
    let scfg = level_solve_config(cfg.alpha);

    struct LevelRun {
        lift: GridRoughPath,
        flat: Trajectory,
        foliated: FoliatedTrajectory,
        roundtrip: f64,
    }
    let mut runs: Vec<LevelRun> = Vec::new();
    for m in cfg.m_lo..=cfg.m_hi {
        let approx = dyadic_approx(&base, m)?;
        let lift = lift_piecewise_linear(&approx, cfg.alpha)?;
        let flat = solve_rde(&lift, &x0, &fields, &scfg, None)?;
        let foliated = solve_rde_foliated(&space, &m0, &lift, &leafwise, &scfg, None)?;
        let back =
            foliated_inverse_point(&space, foliated.endpoint(), &lift, &leafwise, &scfg, cfg.horizon)?;
        let roundtrip = space.distance(&m0, &back)?;
        runs.push(LevelRun {
            lift,
            flat,
            foliated,
            roundtrip,
        });
    }

    let mut rows = Vec::new();
    for (i, m) in (cfg.m_lo..cfg.m_hi).enumerate() {
        let (a, b) = (&runs[i], &runs[i + 1]);
        rows.push(WongZakaiRow {
            m,
            driver_dalpha: rp_distance(&a.lift, &b.lift)?,
            flat_sup: a.flat.sup_distance(&b.flat)?,
            foliated_sup: foliated_sup_distance(&space, &a.foliated, &b.foliated)?,
            roundtrip: a.roundtrip,
        });
    }
    Ok(ConvergenceTable {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        rows,
    })
}

/// Sup of the quotient-metric gap over exactly shared sample times.
fn foliated_sup_distance(
    space: &SuspensionSpace,
    a: &FoliatedTrajectory,
    b: &FoliatedTrajectory,
) -> Result<f64, HarnessError> {
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut shared = 0usize;
    let mut sup = 0.0f64;
    while ia < a.times().len() && ib < b.times().len() {
        let (ta, tb) = (a.times()[ia], b.times()[ib]);
        if ta == tb {
            sup = sup.max(space.distance(&a.points()[ia], &b.points()[ib])?);
            shared += 1;
            ia += 1;
            ib += 1;
        } else if ta < tb {
            ia += 1;
        } else {
            ib += 1;
        }
    }
    if shared < 2 {
        return Err(HarnessError::Config(
            "foliated trajectories share fewer than two sample times".into(),
        ));
    }
    Ok(sup)
}

/// Report of one support-skeleton demonstration.
#[derive(Debug, Clone, Serialize)]
pub struct SupportReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n_seeds: usize,
    /// Dyadic level of the Brownian replicas.
    pub level: u32,
    /// Sup over h's knot times of |rough solve along lift(h) - RK4 oracle|.
    pub ode_match: f64,
    pub skeleton_endpoint: Vec<f64>,
    /// Minimum endpoint distance from a Brownian replica to the skeleton:
    /// qualitative reachability, no threshold asserted.
    pub min_endpoint_distance: f64,
    /// Final winding of the foliated translation solve along lift(h).
    pub skeleton_winding: i64,
    /// ⌊y₁(0) + h¹_T⌋, the translation skeleton's predicted winding.
    pub predicted_winding: i64,
    pub note: &'static str,
}

/// Solves the RDE driven by the canonical lift of a piecewise-linear
/// Cameron-Martin path `h` and checks it against a classical Runge-Kutta
/// integration of `dx = Σ V_i(x) h'^i dt + V_0(x) dt` (two genuinely
/// different routes: one-step rough expansion against RK4). Then reports
/// how close `SUPPORT_SEEDS` Brownian replicas come to the skeleton
/// endpoint, and the winding of the foliated translation skeleton.
pub fn support_skeleton_demo(
    cfg: &ExperimentConfig,
    h: &CameronMartinPath,
) -> Result<SupportReport, HarnessError> {
    cfg.validate()?;
    if h.path().dim() != cfg.d {
        return Err(HarnessError::Config(format!(
            "h has dimension {}, the config says d = {}",
            h.path().dim(),
            cfg.d
        )));
    }
    let (h_lo, h_hi) = (
        h.path().times()[0],
        *h.path().times().last().expect("paths have knots"),
    );
    if h_lo != 0.0 || h_hi != cfg.horizon {
        return Err(HarnessError::Config(format!(
            "h must span [0, T] = [0, {}], got [{h_lo}, {h_hi}]",
            cfg.horizon
        )));
    }

    let fields = flat_family(cfg.field_suite, cfg.p, cfg.d)?;
    let x0 = DVector::from_element(cfg.p, 0.5);
    let lift = cameron_martin_lift(h, cfg.alpha)?;
    let scfg = skeleton_solve_config(cfg.alpha);
    let skeleton = solve_rde(&lift, &x0, &fields, &scfg, None)?;

    let ode = rk4_ode_flow(h.path(), &fields, &x0);
    let mut ode_match = 0.0f64;
    for (k, t) in h.path().times().iter().enumerate() {
        let xs = skeleton.state_at(*t).ok_or_else(|| {
            HarnessError::Config("skeleton samples missed a knot time".into())
        })?;
        ode_match = ode_match.max((xs - &ode[k]).norm());
    }

    let replica_cfg = level_solve_config(cfg.alpha);
    let mut min_dist = f64::INFINITY;
    for k in 0..SUPPORT_SEEDS {
        let w = brownian_rough_path(
            cfg.d,
            cfg.horizon,
            cfg.m_hi,
            replica_seed(cfg.seed, k as u64),
            cfg.alpha,
        )?;
        let traj = solve_rde(&w, &x0, &fields, &replica_cfg, None)?;
        min_dist = min_dist.min((traj.endpoint() - skeleton.endpoint()).norm());
    }

    let space = make_space(cfg.transversal, cfg.p)?;
    let translation = translation_leafwise_family(&space, cfg.d);
    let m0 = LeafPoint::new(
        DVector::from_element(cfg.p, 0.25),
        base_point(cfg.transversal),
    )?;
    let fol = solve_rde_foliated(&space, &m0, &lift, &translation, &scfg, None)?;
    let h_end_1 = h.path().values().last().expect("paths have knots")[0];

    Ok(SupportReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        n_seeds: SUPPORT_SEEDS,
        level: cfg.m_hi,
        ode_match,
        skeleton_endpoint: skeleton.endpoint().iter().copied().collect(),
        min_endpoint_distance: min_dist,
        skeleton_winding: fol.endpoint().winding(),
        predicted_winding: (0.25 + h_end_1).floor() as i64,
        note: "one-directional support check: skeleton points are realized and \
               matched by an independent ODE route; density of the support is \
               out of scope",
    })
}

/// Classical RK4 for `dx = Σ V_i(x) h'^i dt + V_0(x) dt` along a piecewise
/// linear `h` (so h' is constant per segment), sampled at h's knot times.
/// Deliberately shares nothing with the one-step rough scheme.
fn rk4_ode_flow(
    h: &PiecewisePath,
    fields: &VectorFieldFamily,
    x0: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let d = h.dim();
    let mut out = Vec::with_capacity(h.times().len());
    let mut x = x0.clone();
    out.push(x.clone());
    for seg in 0..h.num_segments() {
        let dt_seg = h.times()[seg + 1] - h.times()[seg];
        let slope = (&h.values()[seg + 1] - &h.values()[seg]) / dt_seg;
        let f = |x: &DVector<f64>| -> DVector<f64> {
            let mut v = fields.eval(0, x);
            for j in 1..=d {
                v += fields.eval(j, x) * slope[j - 1];
            }
            v
        };
        let step = dt_seg / RK4_SUBSTEPS as f64;
        for _ in 0..RK4_SUBSTEPS {
            let k1 = f(&x);
            let k2 = f(&(&x + &k1 * (step / 2.0)));
            let k3 = f(&(&x + &k2 * (step / 2.0)));
            let k4 = f(&(&x + &k3 * step));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        }
        out.push(x.clone());
    }
    out
}

/// One epsilon of the concentration sweep.
#[derive(Debug, Clone, Serialize)]
pub struct LdpRow {
    pub epsilon: f64,
    /// Replicas whose ε-scaled solution strayed more than δ from the
    /// drift-only flow (sup over shared sample times).
    pub exceed_count: usize,
    pub exceed_fraction: f64,
}

/// Report of one small-noise concentration run.
#[derive(Debug, Clone, Serialize)]
pub struct LdpReport {
    pub schema_version: u32,
    pub seed: u64,
    pub delta: f64,
    pub level: u32,
    pub n_seeds: usize,
    /// Exact rate value J(h) = ‖h‖²/2 of the supplied Cameron-Martin path.
    pub rate_j: f64,
    pub rows: Vec<LdpRow>,
    pub note: &'static str,
}

/// Computes J(h) = ‖h‖²/2 exactly from the piecewise-linear slope energy,
/// and for each ε in the config's ladder estimates q(ε, δ): the fraction
/// of `LDP_SEEDS` Brownian replicas whose solution along the ε-dilated
/// driver strays more than δ = [`LDP_DELTA`] from the drift-only flow.
/// q is nonincreasing in ε up to Monte-Carlo slack of order 2/√N: that is
/// the concentration consequence of the large-deviation bound.
pub fn ldp_experiment(
    cfg: &ExperimentConfig,
    h: &CameronMartinPath,
) -> Result<LdpReport, HarnessError> {
    cfg.validate()?;
    let fields = flat_family(cfg.field_suite, cfg.p, cfg.d)?;
    let x0 = DVector::from_element(cfg.p, 0.5);
    let scfg = level_solve_config(cfg.alpha);

    // Drift-only reference on the same grid as the scaled replicas, so the
    // sup runs over every sample time.
    let times = dyadic_times(cfg.horizon, LDP_LEVEL);
    let zeros: Vec<DVector<f64>> = times.iter().map(|_| DVector::zeros(cfg.d)).collect();
    let zero_lift = lift_piecewise_linear(&PiecewisePath::new(times, zeros)?, cfg.alpha)?;
    let reference = solve_rde(&zero_lift, &x0, &fields, &scfg, None)?;

    let mut counts = vec![0usize; cfg.epsilons.len()];
    for k in 0..LDP_SEEDS {
        let w = brownian_rough_path(
            cfg.d,
            cfg.horizon,
            LDP_LEVEL,
            replica_seed(cfg.seed, k as u64),
            cfg.alpha,
        )?;
        for (idx, eps) in cfg.epsilons.iter().enumerate() {
            let scaled = dilate(&w, *eps)?;
            let traj = solve_rde(&scaled, &x0, &fields, &scfg, None)?;
            if traj.sup_distance(&reference)? > LDP_DELTA {
                counts[idx] += 1;
            }
        }
    }

    let rows = cfg
        .epsilons
        .iter()
        .zip(&counts)
        .map(|(eps, c)| LdpRow {
            epsilon: *eps,
            exceed_count: *c,
            exceed_fraction: *c as f64 / LDP_SEEDS as f64,
        })
        .collect();
    Ok(LdpReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        delta: LDP_DELTA,
        level: LDP_LEVEL,
        n_seeds: LDP_SEEDS,
        rate_j: h.rate(),
        rows,
        note: "small-noise concentration check (a consequence of the \
               large-deviation bound); the rate constant itself is not \
               estimated",
    })
}

/// h_t = rate · t in driver coordinate 1, zero elsewhere: the default
/// Cameron-Martin input. ‖h‖² = rate² T, so J(h) = rate² T / 2.
pub fn ramp_path(d: usize, horizon: f64, rate: f64) -> Result<CameronMartinPath, HarnessError> {
    if d == 0 {
        return Err(HarnessError::Config("d must be >= 1".into()));
    }
    let mut end = DVector::zeros(d);
    end[0] = rate * horizon;
    let path = PiecewisePath::new(vec![0.0, horizon], vec![DVector::zeros(d), end])?;
    Ok(CameronMartinPath::new(path))
}
