//! Driving vector fields for rough differential equations.
//!
//! A [`VectorFieldFamily`] bundles `d + 1` vector fields on R^p: index 0 is
//! the drift (paired with plain time), indices `1..=d` pair with the driver
//! coordinates. Fields expose values, and — depending on the declared
//! order — Jacobians and Hessians, through closures, so test oracles,
//! built-in suites, and user fields share one surface.
//!
//! The drift can be flipped in place (used by inverse flows, where running
//! the driver backwards must keep `+dt` pairing with `-V_0`).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::SolveError;

type EvalFn = dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync;
type GradFn = dyn Fn(usize, &DVector<f64>) -> DMatrix<f64> + Send + Sync;
type HessFn = dyn Fn(usize, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync;

/// Step size for the finite-difference self-check. Central differences at
/// 1e-5 balance truncation (~h²) against cancellation (~eps/h), leaving
/// roughly ten exact digits on O(1) fields.
const SELF_CHECK_STEP: f64 = 1e-5;

/// Absolute-plus-relative tolerance for the self-check; generous against
/// finite-difference noise, tight enough to catch swapped indices, missing
/// terms, or transposed Jacobians.
const SELF_CHECK_TOL: f64 = 1e-4;

/// A family of `d + 1` vector fields on R^p with derivatives up to a
/// declared order.
///
/// - `eval(i, x)`: the value of field `i` at `x` (index 0 is the drift).
/// - `grad(i, x)`: the Jacobian, `grad[(a, b)] = ∂V_i^a / ∂x^b` (order ≥ 1).
/// - `hess(i, x)`: the Hessians, `hess[a][(b, c)] = ∂²V_i^a / ∂x^b ∂x^c`,
///   each symmetric (order ≥ 2).
#[derive(Clone)]
pub struct VectorFieldFamily {
    state_dim: usize,
    driver_dim: usize,
    order: usize,
    drift_sign: f64,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
    hess: Option<Arc<HessFn>>,
    norm_bound: Option<f64>,
}

impl std::fmt::Debug for VectorFieldFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFieldFamily")
            .field("state_dim", &self.state_dim)
            .field("driver_dim", &self.driver_dim)
            .field("order", &self.order)
            .field("drift_sign", &self.drift_sign)
            .field("norm_bound", &self.norm_bound)
            .finish()
    }
}

impl VectorFieldFamily {
    /// Values only (order 0): enough for quadrature-style consumers, not for
    /// solving.
    pub fn order0<F>(state_dim: usize, driver_dim: usize, eval: F) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        VectorFieldFamily {
            state_dim,
            driver_dim,
            order: 0,
            drift_sign: 1.0,
            eval: Arc::new(eval),
            grad: None,
            hess: None,
            norm_bound: None,
        }
    }

    /// Values and Jacobians (order 1): enough for plain solving.
    pub fn order1<F, G>(state_dim: usize, driver_dim: usize, eval: F, grad: G) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(usize, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        VectorFieldFamily {
            order: 1,
            grad: Some(Arc::new(grad)),
            ..Self::order0(state_dim, driver_dim, eval)
        }
    }

    /// Values, Jacobians and Hessians (order 2): required for Jacobian
    /// flows and remainder diagnostics.
    pub fn order2<F, G, H>(state_dim: usize, driver_dim: usize, eval: F, grad: G, hess: H) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(usize, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        H: Fn(usize, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        VectorFieldFamily {
            order: 2,
            hess: Some(Arc::new(hess)),
            ..Self::order1(state_dim, driver_dim, eval, grad)
        }
    }

    /// Attaches a uniform bound on the fields and their declared derivatives,
    /// reported in manifests; no solver behaviour depends on it.
    pub fn with_norm_bound(mut self, bound: f64) -> Self {
        self.norm_bound = Some(bound);
        self
    }

    /// The same family with the drift negated (driver fields untouched).
    /// Flipping twice restores the original.
    pub fn with_flipped_drift(&self) -> Self {
        let mut out = self.clone();
        out.drift_sign = -self.drift_sign;
        out
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn driver_dim(&self) -> usize {
        self.driver_dim
    }

    /// Highest derivative order the family provides (0, 1, or 2).
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn norm_bound(&self) -> Option<f64> {
        self.norm_bound
    }

    /// Value of field `i` at `x` (`i = 0` is the drift, `1..=d` pair with
    /// driver coordinates).
    pub fn eval(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        debug_assert!(i <= self.driver_dim, "field index {i} out of range");
        debug_assert_eq!(x.len(), self.state_dim);
        let v = (self.eval)(i, x);
        debug_assert_eq!(v.len(), self.state_dim, "field {i} returned wrong dimension");
        if i == 0 && self.drift_sign < 0.0 {
            -v
        } else {
            v
        }
    }

    /// Jacobian of field `i` at `x`.
    ///
    /// Panics if the family was built without gradients; solver entry points
    /// check [`VectorFieldFamily::order`] first and return
    /// [`SolveError::InsufficientOrder`] instead.
    pub fn grad(&self, i: usize, x: &DVector<f64>) -> DMatrix<f64> {
        debug_assert!(i <= self.driver_dim, "field index {i} out of range");
        let g = (self.grad.as_ref().expect("field family provides no gradients"))(i, x);
        debug_assert_eq!((g.nrows(), g.ncols()), (self.state_dim, self.state_dim));
        if i == 0 && self.drift_sign < 0.0 {
            -g
        } else {
            g
        }
    }

    /// Hessians of field `i` at `x`, one symmetric matrix per component.
    ///
    /// Panics if the family was built without Hessians; solver entry points
    /// check the order first.
    pub fn hess(&self, i: usize, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        debug_assert!(i <= self.driver_dim, "field index {i} out of range");
        let h = (self.hess.as_ref().expect("field family provides no hessians"))(i, x);
        debug_assert_eq!(h.len(), self.state_dim, "field {i} returned wrong hessian count");
        if i == 0 && self.drift_sign < 0.0 {
            h.into_iter().map(|m| -m).collect()
        } else {
            h
        }
    }

    /// Verifies the declared derivatives against central finite differences
    /// at `probes` standard-normal points drawn from `seed`. Optional:
    /// call it once after construction when the closures were written by
    /// hand; the built-in suites are checked in their own tests.
    pub fn self_check(&self, seed: u64, probes: usize) -> Result<(), SolveError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.state_dim;
        let h = SELF_CHECK_STEP;
        for _ in 0..probes {
            let x = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            for i in 0..=self.driver_dim {
                if self.order >= 1 {
                    let g = self.grad(i, &x);
                    for b in 0..p {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[b] += h;
                        xm[b] -= h;
                        let fd = (self.eval(i, &xp) - self.eval(i, &xm)) / (2.0 * h);
                        for a in 0..p {
                            let err = (fd[a] - g[(a, b)]).abs();
                            if err > SELF_CHECK_TOL * (1.0 + g[(a, b)].abs()) {
                                return Err(SolveError::SelfCheck {
                                    field: i,
                                    what: "gradient",
                                    row: a,
                                    col: b,
                                    analytic: g[(a, b)],
                                    fd: fd[a],
                                });
                            }
                        }
                    }
                }
                if self.order >= 2 {
                    let hs = self.hess(i, &x);
                    for c in 0..p {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[c] += h;
                        xm[c] -= h;
                        let fd = (self.grad(i, &xp) - self.grad(i, &xm)) / (2.0 * h);
                        for a in 0..p {
                            for b in 0..p {
                                let err = (fd[(a, b)] - hs[a][(b, c)]).abs();
                                if err > SELF_CHECK_TOL * (1.0 + hs[a][(b, c)].abs()) {
                                    return Err(SolveError::SelfCheck {
                                        field: i,
                                        what: "hessian",
                                        row: a,
                                        col: b,
                                        analytic: hs[a][(b, c)],
                                        fd: fd[(a, b)],
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
