//! Region-switched auxiliary-process recipes.
//!
//! The quasiderivative equations carry auxiliary processes `r` (time
//! change), `pi` (measure change), `P` (Wiener rotation) and their
//! second-order companions `r_hat, pi_hat, P_hat`. Near the boundary these
//! are chosen to steer the first quasiderivative tangent to the boundary at
//! exit, paying singular `1/psi` factors; in the interior they come from the
//! interior-condition witness fields. The two regions overlap, and the
//! engine switches with hysteresis inside the overlap band.

use thiserror::Error;

use crate::geometry::{Domain, Levels};
use crate::problem::{ControlProblem, InteriorCondition};
use crate::{MatF, VecF};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("noise projection magnitude {upsilon:e} below floor {floor:e}: normal nondegeneracy unavailable here")]
    UpsilonTooSmall { upsilon: f64, floor: f64 },
}

/// Auxiliary-process values at one state, feeding a single integrator step.
#[derive(Debug, Clone)]
pub struct RecipeValues {
    pub r: f64,
    pub r_hat: f64,
    pub pi: VecF,
    pub pi_hat: VecF,
    pub p: MatF,
    pub p_hat: MatF,
    pub region: RecipeRegion,
}

impl RecipeValues {
    pub fn zero(d1: usize, region: RecipeRegion) -> Self {
        RecipeValues {
            r: 0.0,
            r_hat: 0.0,
            pi: VecF::zeros(d1),
            pi_hat: VecF::zeros(d1),
            p: MatF::zeros(d1, d1),
            p_hat: MatF::zeros(d1, d1),
            region,
        }
    }
}

/// Which of the two recipes produced the values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipeRegion {
    Boundary,
    Interior,
}

/// Recipe selection policy for a bundle integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipeMode {
    /// Hysteresis switching inside the overlap band.
    Auto,
    /// Boundary recipe everywhere (valid while paths stay below the upper
    /// overlap level).
    ForceBoundary,
    /// Interior recipe everywhere (valid while paths stay above lambda^2).
    ForceInterior,
}

/// Hysteresis thresholds inside the overlap band `(lambda^2, lambda)`:
/// switch to the interior recipe above `s_high`, back to the boundary
/// recipe below `s_low`.
pub fn hysteresis_thresholds(levels: Levels) -> (f64, f64) {
    let l2 = levels.lambda * levels.lambda;
    let width = levels.lambda - l2;
    (l2 + 0.25 * width, l2 + 0.75 * width)
}

/// Initial recipe choice by psi value.
pub fn initial_region(psi: f64, levels: Levels) -> RecipeRegion {
    let (s_low, s_high) = hysteresis_thresholds(levels);
    if psi < 0.5 * (s_low + s_high) {
        RecipeRegion::Boundary
    } else {
        RecipeRegion::Interior
    }
}

/// One hysteresis update; at most one switch per step.
pub fn next_region(current: RecipeRegion, psi: f64, levels: Levels) -> RecipeRegion {
    let (s_low, s_high) = hysteresis_thresholds(levels);
    match current {
        RecipeRegion::Boundary if psi > s_high => RecipeRegion::Interior,
        RecipeRegion::Interior if psi < s_low => RecipeRegion::Boundary,
        other => other,
    }
}

/// Boundary-layer recipe at `(x, xi)`:
///
/// ```text
/// Upsilon = sum_k psi_(sigma^k)^2
/// rho     = -(1/Upsilon) sum_k psi_(sigma^k) (psi_(sigma^k))_(xi)
/// r       = rho + psi_(xi)/psi              r_hat = psi_(xi)^2 / psi^2
/// pi^k    = 2 psi_(sigma^k) psi_(xi) / (phi psi),   phi = lambda^2 + psi (1 - psi/(4 lambda))
/// P^{ik}  = (1/Upsilon)[psi_(sigma^k)(psi_(sigma^i))_(xi) - psi_(sigma^i)(psi_(sigma^k))_(xi)]
/// pi_hat = 0, P_hat = 0
/// ```
///
/// `(psi_(sigma^k))_(xi)` differentiates the whole map `x -> psi_x sigma^k(x)`,
/// so it carries both the Hessian of psi and the spatial derivative of sigma.
pub fn boundary_recipe(
    problem: &ControlProblem,
    domain: &Domain,
    alpha: usize,
    x: &VecF,
    xi: &VecF,
    lambda: f64,
    upsilon_floor: f64,
) -> Result<RecipeValues, RecipeError> {
    let d1 = problem.d1;
    let psi = domain.psi(x);
    let grad = domain.grad(x);
    let hess = domain.hess(x);
    let sigma = problem.sigma(alpha, x);
    let sigma_xi = problem.sigma_dir(alpha, x, xi);

    // psi_(sigma^k) and (psi_(sigma^k))_(xi) per noise column.
    let mut psi_sig = VecF::zeros(d1);
    let mut psi_sig_xi = VecF::zeros(d1);
    let hess_xi = &hess * xi; // row contraction: (psi_xx xi)
    for k in 0..d1 {
        let col = sigma.column(k);
        psi_sig[k] = grad.dot(&col.clone_owned());
        let col_xi = sigma_xi.column(k);
        psi_sig_xi[k] = hess_xi.dot(&col.clone_owned()) + grad.dot(&col_xi.clone_owned());
    }
    let upsilon = psi_sig.norm_squared();
    if upsilon < upsilon_floor {
        return Err(RecipeError::UpsilonTooSmall {
            upsilon,
            floor: upsilon_floor,
        });
    }

    let psi_xi = grad.dot(xi);
    let rho = -psi_sig.dot(&psi_sig_xi) / upsilon;
    let r = rho + psi_xi / psi;
    let r_hat = (psi_xi / psi).powi(2);
    let phi = lambda * lambda + psi * (1.0 - psi / (4.0 * lambda));
    let pi = &psi_sig * (2.0 * psi_xi / (phi * psi));
    let mut p = MatF::zeros(d1, d1);
    for i in 0..d1 {
        for k in 0..d1 {
            p[(i, k)] = (psi_sig[k] * psi_sig_xi[i] - psi_sig[i] * psi_sig_xi[k]) / upsilon;
        }
    }
    Ok(RecipeValues {
        r,
        r_hat,
        pi,
        pi_hat: VecF::zeros(d1),
        p,
        p_hat: MatF::zeros(d1, d1),
        region: RecipeRegion::Boundary,
    })
}

/// Interior recipe at `(x, xi, eta)` from the interior-condition witness
/// fields: `r = (rho, xi)`, `pi = (M/2) sigma^T xi`, `P = Q(x, xi)`, and the
/// same maps applied to `eta` for the hatted processes.
pub fn interior_recipe(
    problem: &ControlProblem,
    cond: &InteriorCondition,
    alpha: usize,
    x: &VecF,
    xi: &VecF,
    eta: &VecF,
) -> RecipeValues {
    let rho = cond.rho(alpha, x);
    let m = cond.m(alpha, x);
    let sigma_t = problem.sigma(alpha, x).transpose();
    let r = rho.dot(xi);
    let r_hat = rho.dot(eta);
    let pi = (&sigma_t * xi) * (m / 2.0);
    let pi_hat = (&sigma_t * eta) * (m / 2.0);
    let p = cond.q(alpha, x, xi);
    let p_hat = cond.q(alpha, x, eta);
    RecipeValues {
        r,
        r_hat,
        pi,
        pi_hat,
        p,
        p_hat,
        region: RecipeRegion::Interior,
    }
}
