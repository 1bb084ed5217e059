//! Coupled path-bundle integrator.
//!
//! One bundle carries, on a shared Wiener increment stream: the base process,
//! the epsilon-perturbed process, the two second-order perturbed processes
//! (at +eps and -eps), the first and second quasiderivatives, the accumulated
//! discount, the augmented coordinates feeding the pathwise derivative
//! representations, and the change-of-measure weight. Integration is explicit
//! Euler-Maruyama with a step size shrinking proportionally to the depth
//! coordinate near the boundary, exit refinement by bisection along the last
//! segment, a quasiderivative-norm cap, and a time horizon.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Domain, Levels};
use crate::linalg::skew_exp;
use crate::problem::{ControlProblem, InteriorCondition};
use crate::recipe::{
    boundary_recipe, initial_region, interior_recipe, next_region, RecipeMode, RecipeRegion,
    RecipeValues,
};
use crate::VecF;

pub const DT_MIN: f64 = 1e-9;
pub const EXIT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("step rejected: 1 + 2 eps r = {value} not positive (r = {r})")]
    StepRejected { value: f64, r: f64 },
    #[error("path aborted at t={t}: {reason}")]
    PathAborted { t: f64, reason: String },
    #[error("start point is not inside the stopping region")]
    BadStart,
}

/// Markov policy: control label as a function of the current state.
#[derive(Debug, Clone)]
pub enum MarkovPolicy {
    Constant(usize),
    /// Nearest-neighbor lookup on a rectilinear grid of policy labels.
    Grid {
        lo: VecF,
        hi: VecF,
        shape: Vec<usize>,
        labels: Vec<usize>,
    },
}

impl MarkovPolicy {
    pub fn control(&self, x: &VecF) -> usize {
        match self {
            MarkovPolicy::Constant(alpha) => *alpha,
            MarkovPolicy::Grid {
                lo,
                hi,
                shape,
                labels,
            } => {
                let mut idx = 0usize;
                let mut stride = 1usize;
                for axis in 0..shape.len() {
                    let n = shape[axis];
                    let t = if hi[axis] > lo[axis] {
                        ((x[axis] - lo[axis]) / (hi[axis] - lo[axis]) * (n as f64 - 1.0)).round()
                    } else {
                        0.0
                    };
                    let i = (t.max(0.0) as usize).min(n - 1);
                    idx += i * stride;
                    stride *= n;
                }
                labels[idx.min(labels.len() - 1)]
            }
        }
    }
}

/// Stopping surface in terms of the depth coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopRegion {
    /// The whole domain: stop at psi <= 0.
    Domain,
    /// Sub-level set {psi > lo}.
    PsiAbove { lo: f64 },
    /// Band {lo < psi < hi}.
    PsiBand { lo: f64, hi: f64 },
}

impl StopRegion {
    /// Signed clearance: positive while strictly inside the region.
    pub fn clearance(&self, psi: f64) -> f64 {
        match self {
            StopRegion::Domain => psi,
            StopRegion::PsiAbove { lo } => psi - lo,
            StopRegion::PsiBand { lo, hi } => (psi - lo).min(hi - psi),
        }
    }

    pub fn contains(&self, psi: f64) -> bool {
        self.clearance(psi) > 0.0
    }
}

/// Truncation and step-size caps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Caps {
    /// Quasiderivative norm cap: stop when |xi| >= xi_cap.
    pub xi_cap: f64,
    /// Time horizon.
    pub horizon: f64,
    /// Base step size.
    pub dt0: f64,
    /// Near-boundary step control: dt <= dt_boundary_factor * psi.
    pub dt_boundary_factor: f64,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            xi_cap: 100.0,
            horizon: 50.0,
            dt0: 1e-3,
            dt_boundary_factor: 0.1,
        }
    }
}

/// Which coupled processes to integrate. The perturbed processes need the
/// first quasiderivative (the recipes are evaluated on it), and the
/// second-order perturbed processes need the second quasiderivative.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcessSet {
    pub perturbed: bool,
    pub second_perturbed: bool,
    pub xi: bool,
    pub eta: bool,
}

impl ProcessSet {
    pub fn value_only() -> Self {
        ProcessSet::default()
    }

    pub fn first_order() -> Self {
        ProcessSet {
            xi: true,
            ..Default::default()
        }
    }

    pub fn second_order() -> Self {
        ProcessSet {
            xi: true,
            eta: true,
            ..Default::default()
        }
    }

    pub fn with_perturbed() -> Self {
        ProcessSet {
            perturbed: true,
            xi: true,
            ..Default::default()
        }
    }

    pub fn full() -> Self {
        ProcessSet {
            perturbed: true,
            second_perturbed: true,
            xi: true,
            eta: true,
        }
    }

    fn normalized(mut self) -> Self {
        if self.second_perturbed {
            self.eta = true;
        }
        if self.perturbed || self.eta {
            self.xi = true;
        }
        self
    }
}

/// Full integration settings for one bundle family.
#[derive(Clone)]
pub struct SimSpec {
    pub eps: f64,
    pub processes: ProcessSet,
    pub recipe_mode: RecipeMode,
    pub stop_region: StopRegion,
    pub levels: Levels,
    pub caps: Caps,
    /// Snapshot times for barrier tests; states are clamped at the stop time.
    pub checkpoints: Vec<f64>,
    /// Hard floor for the squared noise projection in the boundary recipe.
    pub upsilon_floor: f64,
    /// Keep integrating the base process after a perturbed process exits
    /// (used by the exit-time gap estimator).
    pub continue_base_after_perturbed_exit: bool,
    /// Record the full trace (t, x, xi, eta, phi, p_eps, region) per step.
    pub trace: bool,
}

impl SimSpec {
    pub fn new(processes: ProcessSet) -> Self {
        SimSpec {
            eps: 0.0,
            processes: processes.normalized(),
            recipe_mode: RecipeMode::Auto,
            stop_region: StopRegion::Domain,
            levels: Levels::default(),
            caps: Caps::default(),
            checkpoints: Vec::new(),
            upsilon_floor: 0.0,
            continue_base_after_perturbed_exit: false,
            trace: false,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_caps(mut self, caps: Caps) -> Self {
        self.caps = caps;
        self
    }

    pub fn with_levels(mut self, levels: Levels) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_recipe_mode(mut self, mode: RecipeMode) -> Self {
        self.recipe_mode = mode;
        self
    }

    pub fn with_stop_region(mut self, region: StopRegion) -> Self {
        self.stop_region = region;
        self
    }

    pub fn with_checkpoints(mut self, t: Vec<f64>) -> Self {
        self.checkpoints = t;
        self
    }

    pub fn with_upsilon_floor(mut self, floor: f64) -> Self {
        self.upsilon_floor = floor;
        self
    }
}

/// Which process triggered a stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessTag {
    Base,
    Perturbed,
    SecondPlus,
    SecondMinus,
}

#[derive(Debug, Clone)]
pub struct ExitRecord {
    pub time: f64,
    pub point: VecF,
    pub process: ProcessTag,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopCause {
    /// A spatial process left the stopping region.
    Exit(ProcessTag),
    /// |xi| reached the cap.
    XiCap,
    /// Time horizon reached.
    Horizon,
    /// Step rejection cascade or non-finite state.
    Aborted(String),
}

/// Mutable state of one coupled bundle.
#[derive(Debug, Clone)]
pub struct BundleState {
    pub t: f64,
    pub x: VecF,
    pub y: Option<VecF>,
    pub z_plus: Option<VecF>,
    pub z_minus: Option<VecF>,
    pub xi: VecF,
    pub eta: VecF,
    /// Accumulated discount integral of the problem's own rate.
    pub phi: f64,
    /// Augmented first-order coordinates: discount derivative, measure
    /// martingale, payoff derivative integral.
    pub xi_aug: [f64; 3],
    /// Augmented second-order coordinates.
    pub eta_aug: [f64; 3],
    /// Change-of-measure weight.
    pub p_eps: f64,
    /// Running payoff integral with the effective discount.
    pub payoff_integral: f64,
    /// Integral feeding the second-derivative representation.
    pub y_rep_integral: f64,
    pub region: RecipeRegion,
}

impl BundleState {
    fn fresh(x0: &VecF, xi0: &VecF, eta0: &VecF, spec: &SimSpec, region: RecipeRegion) -> Self {
        let processes = spec.processes;
        BundleState {
            t: 0.0,
            x: x0.clone(),
            y: processes.perturbed.then(|| x0 + xi0 * spec.eps),
            z_plus: processes
                .second_perturbed
                .then(|| x0 + xi0 * spec.eps + eta0 * (0.5 * spec.eps * spec.eps)),
            z_minus: processes
                .second_perturbed
                .then(|| x0 - xi0 * spec.eps + eta0 * (0.5 * spec.eps * spec.eps)),
            xi: xi0.clone(),
            eta: eta0.clone(),
            phi: 0.0,
            xi_aug: [0.0; 3],
            eta_aug: [0.0; 3],
            p_eps: 1.0,
            payoff_integral: 0.0,
            y_rep_integral: 0.0,
            region,
        }
    }
}

/// Running pathwise statistics, accumulated during integration.
#[derive(Debug, Clone, Default)]
pub struct PathStats {
    pub sup_xi_sq: f64,
    pub sup_eta_norm: f64,
    pub int_xi_sq: f64,
    /// integral of |xi|^2 + psi_(xi)^2/psi^2
    pub int_xi_barrier: f64,
    pub int_eta_sq: f64,
    pub sup_disc_xi_sq: f64,
    pub int_disc_xi_sq: f64,
    pub sup_disc_eta: f64,
    pub int_disc2_eta_sq: f64,
    pub sup_disc_half_xi_sq: f64,
    pub int_disc_half_xi_sq: f64,
    pub sup_disc_half_eta: f64,
    pub int_disc2_t_eta_sq: f64,
    pub sup_y_minus_x: f64,
    pub sup_first_diff_err: f64,
    pub sup_second_diff_err: f64,
    pub steps: usize,
    pub recipe_switches: usize,
}

/// Snapshot of the barrier-relevant state at a checkpoint time, clamped at
/// the stop time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t_checkpoint: f64,
    pub t_actual: f64,
    pub x: VecF,
    pub xi: VecF,
    pub eta: VecF,
    pub phi: f64,
    pub p_eps: f64,
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub phi: f64,
    pub p_eps: f64,
    pub region: &'static str,
}

/// One integrated bundle: terminal state, stop cause, exits, accumulators.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub path_index: u64,
    pub tip: BundleState,
    pub stop: StopCause,
    pub exits: Vec<ExitRecord>,
    pub stats: PathStats,
    pub snapshots: Vec<Snapshot>,
    pub trace: Vec<TraceRow>,
    /// Base-process exit time when integration continued past a perturbed
    /// exit (exit-time gap mode).
    pub base_exit_time: Option<f64>,
}

impl PathBundle {
    pub fn exited(&self) -> bool {
        matches!(self.stop, StopCause::Exit(ProcessTag::Base))
    }

    pub fn hit_xi_cap(&self) -> bool {
        matches!(self.stop, StopCause::XiCap)
    }

    pub fn hit_horizon(&self) -> bool {
        matches!(self.stop, StopCause::Horizon)
    }

    pub fn aborted(&self) -> bool {
        matches!(self.stop, StopCause::Aborted(_))
    }

    /// Effective discount exponent at the stop time: `phi - shift * t`.
    pub fn effective_phi(&self, problem: &ControlProblem) -> f64 {
        self.tip.phi - problem.discount_shift * self.tip.t
    }
}

/// Per-path RNG stream: deterministic in (seed, path index), independent of
/// thread scheduling.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut z = seed ^ path_index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(path_index);
    rng
}

struct StepInput<'a> {
    problem: &'a ControlProblem,
    alpha: usize,
    dt: f64,
    dw: &'a VecF,
    eps: f64,
    recipe: &'a RecipeValues,
}

/// Explicit Euler-Maruyama update of every active component on a shared
/// Wiener increment. Fails when a square-root factor leaves its domain
/// (caller halves dt) or the state goes non-finite.
fn step_bundle(
    state: &BundleState,
    input: &StepInput<'_>,
    processes: ProcessSet,
) -> Result<BundleState, EngineError> {
    let problem = input.problem;
    let alpha = input.alpha;
    let dt = input.dt;
    let dw = input.dw;
    let eps = input.eps;
    let rec = input.recipe;

    let mut next = state.clone();
    next.t = state.t + dt;

    // Base process: dx = sigma dW + b dt.
    let sigma_x = problem.sigma(alpha, &state.x);
    let b_x = problem.drift(alpha, &state.x);
    next.x = &state.x + &sigma_x * dw + &b_x * dt;

    // Discount integral with the problem's own rate.
    let c_x = problem.discount(alpha, &state.x);
    next.phi = state.phi + c_x * dt;

    // Running payoff integral with the effective discount.
    let f_x = problem.running(alpha, &state.x);
    let disc_eff = (-(state.phi - problem.discount_shift * state.t)).exp();
    next.payoff_integral = state.payoff_integral + f_x * disc_eff * dt;

    // Perturbed process. eps = 0 must reproduce the base update bitwise, so
    // the rotation and drift corrections are skipped entirely in that case.
    if processes.perturbed {
        let y = state.y.as_ref().expect("perturbed state present");
        if eps == 0.0 {
            let sigma_y = problem.sigma(alpha, y);
            let b_y = problem.drift(alpha, y);
            next.y = Some(y + &sigma_y * dw + &b_y * dt);
        } else {
            let fac_sq = 1.0 + 2.0 * eps * rec.r;
            if fac_sq <= 0.0 {
                return Err(EngineError::StepRejected {
                    value: fac_sq,
                    r: rec.r,
                });
            }
            let fac = fac_sq.sqrt();
            let rot = skew_exp(&rec.p, eps).map_err(|e| EngineError::PathAborted {
                t: state.t,
                reason: format!("rotation failure: {e}"),
            })?;
            let sigma_y = problem.sigma(alpha, y);
            let b_y = problem.drift(alpha, y);
            let sig_rot = &sigma_y * &rot;
            let drift = &b_y * fac_sq - &sig_rot * (&rec.pi * (eps * fac));
            next.y = Some(y + &sig_rot * (dw * fac) + drift * dt);
        }
    }

    // Second-order perturbed processes at +eps and -eps.
    if processes.second_perturbed {
        for sign in [1.0f64, -1.0] {
            let z = if sign > 0.0 {
                state.z_plus.as_ref().expect("z+ state present")
            } else {
                state.z_minus.as_ref().expect("z- state present")
            };
            let e = sign * eps;
            let updated = if eps == 0.0 {
                let sigma_z = problem.sigma(alpha, z);
                let b_z = problem.drift(alpha, z);
                z + &sigma_z * dw + &b_z * dt
            } else {
                let fac_sq = 1.0 + 2.0 * e * rec.r + e * e * rec.r_hat;
                if fac_sq <= 0.0 {
                    return Err(EngineError::StepRejected {
                        value: fac_sq,
                        r: rec.r,
                    });
                }
                let fac = fac_sq.sqrt();
                let rot1 = skew_exp(&rec.p, e).map_err(|er| EngineError::PathAborted {
                    t: state.t,
                    reason: format!("rotation failure: {er}"),
                })?;
                let rot2 =
                    skew_exp(&rec.p_hat, 0.5 * e * e).map_err(|er| EngineError::PathAborted {
                        t: state.t,
                        reason: format!("rotation failure: {er}"),
                    })?;
                let rot = rot1 * rot2;
                let sigma_z = problem.sigma(alpha, z);
                let b_z = problem.drift(alpha, z);
                let sig_rot = &sigma_z * rot;
                let shift = &rec.pi * e + &rec.pi_hat * (0.5 * e * e);
                let drift = &b_z * fac_sq - &sig_rot * (shift * fac);
                z + &sig_rot * (dw * fac) + drift * dt
            };
            if sign > 0.0 {
                next.z_plus = Some(updated);
            } else {
                next.z_minus = Some(updated);
            }
        }
    }

    if processes.xi {
        // d xi = [sigma_(xi) + r sigma + sigma P] dW
        //      + [b_(xi) + 2 r b - sigma pi] dt
        let sigma_dxi = problem.sigma_dir(alpha, &state.x, &state.xi);
        let b_dxi = problem.drift_dir(alpha, &state.x, &state.xi);
        let diff = &sigma_dxi + &sigma_x * rec.r + &sigma_x * &rec.p;
        let drift = &b_dxi + &b_x * (2.0 * rec.r) - &sigma_x * &rec.pi;
        next.xi = &state.xi + diff * dw + drift * dt;

        // Augmented coordinates for the first-derivative representation;
        // the rate entering them is the effective one.
        let c_eff = c_x - problem.discount_shift;
        let c_dxi = problem.discount_dir(alpha, &state.x, &state.xi);
        next.xi_aug[0] = state.xi_aug[0] - (c_dxi + 2.0 * rec.r * c_eff) * dt;
        next.xi_aug[1] = state.xi_aug[1] + rec.pi.dot(dw);
        let f_dxi = problem.running_dir(alpha, &state.x, &state.xi);
        next.xi_aug[2] = state.xi_aug[2]
            + disc_eff * (f_dxi + (2.0 * rec.r + state.xi_aug[0] + state.xi_aug[1]) * f_x) * dt;

        if processes.eta {
            // d eta = [sigma_(eta) + r_hat sigma + sigma P_hat
            //          + sigma_(xi)(xi) + 2 r sigma_(xi) + 2 sigma_(xi) P
            //          + 2 r sigma P - r^2 sigma + sigma P^2] dW
            //       + [b_(eta) + 2 r_hat b - sigma pi_hat + b_(xi)(xi)
            //          + 4 r b_(xi) - 2 sigma_(xi) pi - 2 r sigma pi
            //          - 2 sigma P pi] dt
            let sigma_deta = problem.sigma_dir(alpha, &state.x, &state.eta);
            let sigma_dxixi = problem.sigma_dir2(alpha, &state.x, &state.xi);
            let b_deta = problem.drift_dir(alpha, &state.x, &state.eta);
            let b_dxixi = problem.drift_dir2(alpha, &state.x, &state.xi);
            let sigma_p = &sigma_x * &rec.p;
            let diff_eta = &sigma_deta
                + &sigma_x * rec.r_hat
                + &sigma_x * &rec.p_hat
                + &sigma_dxixi
                + &sigma_dxi * (2.0 * rec.r)
                + &sigma_dxi * &rec.p * 2.0
                + &sigma_p * (2.0 * rec.r)
                - &sigma_x * (rec.r * rec.r)
                + &sigma_p * &rec.p;
            let drift_eta = &b_deta + &b_x * (2.0 * rec.r_hat) - &sigma_x * &rec.pi_hat
                + &b_dxixi
                + &b_dxi * (4.0 * rec.r)
                - &sigma_dxi * &rec.pi * 2.0
                - &sigma_x * &rec.pi * (2.0 * rec.r)
                - &sigma_p * &rec.pi * 2.0;
            next.eta = &state.eta + diff_eta * dw + drift_eta * dt;

            // Augmented second-order coordinates.
            let c_dxixi = problem.discount_dir2(alpha, &state.x, &state.xi);
            let c_deta = problem.discount_dir(alpha, &state.x, &state.eta);
            next.eta_aug[0] = state.eta_aug[0]
                - (c_dxixi + c_deta + 4.0 * rec.r * c_dxi + 2.0 * rec.r_hat * c_eff) * dt;
            // d eta^0 = (2 xi^0 pi + pi_hat) dW
            let mix = &rec.pi * (2.0 * state.xi_aug[1]) + &rec.pi_hat;
            next.eta_aug[1] = state.eta_aug[1] + mix.dot(dw);
            let f_dxixi = problem.running_dir2(alpha, &state.x, &state.xi);
            let f_deta = problem.running_dir(alpha, &state.x, &state.eta);
            next.eta_aug[2] = state.eta_aug[2]
                + disc_eff
                    * (f_dxixi
                        + f_deta
                        + (2.0 * state.xi_aug[0] + 4.0 * rec.r) * f_dxi
                        + (state.xi_aug[0] * state.xi_aug[0]
                            + state.eta_aug[0]
                            + 4.0 * rec.r * state.xi_aug[0]
                            + 2.0 * rec.r_hat)
                            * f_x)
                    * dt;

            // Integral feeding the second-derivative representation, with
            // the running martingale-corrected coordinates.
            let xi_tilde0 = state.xi_aug[1] + state.xi_aug[0];
            let eta_tilde0 = state.eta_aug[1]
                + 2.0 * state.xi_aug[1] * state.xi_aug[0]
                + state.xi_aug[0] * state.xi_aug[0]
                + state.eta_aug[0];
            next.y_rep_integral = state.y_rep_integral
                + disc_eff
                    * (f_dxixi
                        + f_deta
                        + (4.0 * rec.r + 2.0 * xi_tilde0) * f_dxi
                        + (2.0 * rec.r_hat + 4.0 * xi_tilde0 * rec.r + eta_tilde0) * f_x)
                    * dt;
        }

        // Change-of-measure weight: exponential-martingale update.
        if eps != 0.0 {
            let drift_term = eps * rec.pi.dot(dw);
            let quad = (eps * eps) * rec.pi.norm_squared() * dt;
            next.p_eps = state.p_eps * (drift_term - 0.5 * quad).exp();
        }
    }

    let finite = next.x.iter().all(|v| v.is_finite())
        && next.xi.iter().all(|v| v.is_finite())
        && next.eta.iter().all(|v| v.is_finite())
        && next.phi.is_finite()
        && next.p_eps.is_finite()
        && next.y.as_ref().map_or(true, |y| y.iter().all(|v| v.is_finite()))
        && next
            .z_plus
            .as_ref()
            .map_or(true, |z| z.iter().all(|v| v.is_finite()))
        && next
            .z_minus
            .as_ref()
            .map_or(true, |z| z.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(EngineError::PathAborted {
            t: state.t,
            reason: "non-finite state".into(),
        });
    }
    Ok(next)
}

/// Linear interpolation of every bundle component along the last segment.
fn lerp_state(a: &BundleState, b: &BundleState, theta: f64) -> BundleState {
    let lv = |u: &VecF, v: &VecF| u + (v - u) * theta;
    let ls = |u: f64, v: f64| u + (v - u) * theta;
    BundleState {
        t: ls(a.t, b.t),
        x: lv(&a.x, &b.x),
        y: match (&a.y, &b.y) {
            (Some(u), Some(v)) => Some(lv(u, v)),
            _ => b.y.clone(),
        },
        z_plus: match (&a.z_plus, &b.z_plus) {
            (Some(u), Some(v)) => Some(lv(u, v)),
            _ => b.z_plus.clone(),
        },
        z_minus: match (&a.z_minus, &b.z_minus) {
            (Some(u), Some(v)) => Some(lv(u, v)),
            _ => b.z_minus.clone(),
        },
        xi: lv(&a.xi, &b.xi),
        eta: lv(&a.eta, &b.eta),
        phi: ls(a.phi, b.phi),
        xi_aug: [
            ls(a.xi_aug[0], b.xi_aug[0]),
            ls(a.xi_aug[1], b.xi_aug[1]),
            ls(a.xi_aug[2], b.xi_aug[2]),
        ],
        eta_aug: [
            ls(a.eta_aug[0], b.eta_aug[0]),
            ls(a.eta_aug[1], b.eta_aug[1]),
            ls(a.eta_aug[2], b.eta_aug[2]),
        ],
        // The weight is a martingale: prorating its last multiplicative
        // update by the crossing fraction would correlate it with the
        // increment that triggered the crossing and bias the stopped mean.
        // The first step index landing outside is a discrete stopping time,
        // so the full post-step value keeps the mean exactly one.
        p_eps: b.p_eps,
        payoff_integral: ls(a.payoff_integral, b.payoff_integral),
        y_rep_integral: ls(a.y_rep_integral, b.y_rep_integral),
        region: a.region,
    }
}

/// Bisection along the segment for the crossing of the stop surface by the
/// given spatial component; returns theta in (0, 1] with the clearance of
/// the crossing point within tolerance.
fn refine_crossing(
    domain: &Domain,
    region: &StopRegion,
    a: &BundleState,
    b: &BundleState,
    pick: impl Fn(&BundleState) -> &VecF,
) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut mid = 1.0f64;
    for _ in 0..100 {
        mid = 0.5 * (lo + hi);
        let s = lerp_state(a, b, mid);
        let psi = domain.psi(pick(&s));
        let c = region.clearance(psi);
        if c.abs() <= EXIT_TOL {
            return mid;
        }
        if c > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// Integrates one coupled bundle from `(x0, xi0, eta0)` until the first of:
/// a spatial process leaving the stop region (refined by bisection), the
/// quasiderivative cap, or the horizon. The recipe is selected per region
/// with hysteresis; step sizes shrink proportionally to the depth coordinate.
#[allow(clippy::too_many_arguments)]
pub fn simulate_bundle(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    x0: &VecF,
    xi0: &VecF,
    eta0: &VecF,
    policy: &MarkovPolicy,
    spec: &SimSpec,
    seed: u64,
    path_index: u64,
) -> Result<PathBundle, EngineError> {
    let psi0 = domain.psi(x0);
    if !spec.stop_region.contains(psi0) {
        return Err(EngineError::BadStart);
    }
    let mut rng = path_rng(seed, path_index);
    let mut spec = spec.clone();
    spec.processes = spec.processes.normalized();
    let d1 = problem.d1;

    let region0 = match spec.recipe_mode {
        RecipeMode::Auto => initial_region(psi0, spec.levels),
        RecipeMode::ForceBoundary => RecipeRegion::Boundary,
        RecipeMode::ForceInterior => RecipeRegion::Interior,
    };
    let mut state = BundleState::fresh(x0, xi0, eta0, &spec, region0);
    let mut active = spec.processes;

    let mut stats = PathStats::default();
    let mut exits: Vec<ExitRecord> = Vec::new();
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut checkpoints = spec.checkpoints.clone();
    checkpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut next_cp = 0usize;
    let mut base_exit_time: Option<f64> = None;

    if spec.trace {
        push_trace(&mut trace, &state);
    }
    // The running sups cover the initial state as well.
    accumulate_sups(&mut stats, &state, spec.eps, &active);
    // Checkpoint at t = 0 (or earlier) snapshots the initial state.
    while next_cp < checkpoints.len() && checkpoints[next_cp] <= 0.0 {
        snapshots.push(snapshot_at(checkpoints[next_cp], &state));
        next_cp += 1;
    }

    let stop = 'outer: loop {
        if state.t >= spec.caps.horizon - 1e-15 {
            break StopCause::Horizon;
        }
        if active.xi && state.xi.norm() >= spec.caps.xi_cap {
            break StopCause::XiCap;
        }

        let psi = domain.psi(&state.x);
        if spec.recipe_mode == RecipeMode::Auto {
            let new_region = next_region(state.region, psi, spec.levels);
            if new_region != state.region {
                stats.recipe_switches += 1;
                state.region = new_region;
            }
        }

        let alpha = policy.control(&state.x);

        let mut dt = spec
            .caps
            .dt0
            .min(spec.caps.dt_boundary_factor * psi.abs().max(DT_MIN));
        dt = dt.min(spec.caps.horizon - state.t).max(DT_MIN);
        if next_cp < checkpoints.len() {
            let cp = checkpoints[next_cp];
            if cp > state.t {
                dt = dt.min(cp - state.t);
            }
        }

        let recipe = if active.xi {
            match state.region {
                RecipeRegion::Boundary => match boundary_recipe(
                    problem,
                    domain,
                    alpha,
                    &state.x,
                    &state.xi,
                    spec.levels.lambda,
                    spec.upsilon_floor,
                ) {
                    Ok(r) => r,
                    Err(e) => break StopCause::Aborted(e.to_string()),
                },
                RecipeRegion::Interior => {
                    interior_recipe(problem, cond, alpha, &state.x, &state.xi, &state.eta)
                }
            }
        } else {
            RecipeValues::zero(d1, state.region)
        };

        // Step with halving on square-root domain rejection.
        let mut cur_dt = dt;
        let next = loop {
            let dw = VecF::from_fn(d1, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * cur_dt.sqrt()
            });
            let input = StepInput {
                problem,
                alpha,
                dt: cur_dt,
                dw: &dw,
                eps: spec.eps,
                recipe: &recipe,
            };
            match step_bundle(&state, &input, active) {
                Ok(next) => break next,
                Err(EngineError::StepRejected { .. }) => {
                    cur_dt *= 0.5;
                    if cur_dt < DT_MIN {
                        break 'outer StopCause::Aborted(format!(
                            "step rejection cascade below dt_min at t={:.6}",
                            state.t
                        ));
                    }
                }
                Err(EngineError::PathAborted { reason, .. }) => {
                    break 'outer StopCause::Aborted(reason);
                }
                Err(other) => return Err(other),
            }
        };

        // Exit detection per active spatial process, earliest crossing first.
        let mut crossings: Vec<(f64, ProcessTag)> = Vec::new();
        if !spec.stop_region.contains(domain.psi(&next.x)) {
            let theta = refine_crossing(domain, &spec.stop_region, &state, &next, |s| &s.x);
            crossings.push((theta, ProcessTag::Base));
        }
        if let Some(y) = &next.y {
            if !spec.stop_region.contains(domain.psi(y)) {
                let theta = refine_crossing(domain, &spec.stop_region, &state, &next, |s| {
                    s.y.as_ref().expect("y present")
                });
                crossings.push((theta, ProcessTag::Perturbed));
            }
        }
        if let Some(z) = &next.z_plus {
            if !spec.stop_region.contains(domain.psi(z)) {
                let theta = refine_crossing(domain, &spec.stop_region, &state, &next, |s| {
                    s.z_plus.as_ref().expect("z+ present")
                });
                crossings.push((theta, ProcessTag::SecondPlus));
            }
        }
        if let Some(z) = &next.z_minus {
            if !spec.stop_region.contains(domain.psi(z)) {
                let theta = refine_crossing(domain, &spec.stop_region, &state, &next, |s| {
                    s.z_minus.as_ref().expect("z- present")
                });
                crossings.push((theta, ProcessTag::SecondMinus));
            }
        }

        if !crossings.is_empty() {
            crossings.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let (theta, tag) = crossings[0];
            accumulate_integrals(&mut stats, &state, domain, theta * cur_dt);
            let stopped = lerp_state(&state, &next, theta);
            let point = match tag {
                ProcessTag::Base => stopped.x.clone(),
                ProcessTag::Perturbed => stopped.y.clone().expect("y present"),
                ProcessTag::SecondPlus => stopped.z_plus.clone().expect("z+ present"),
                ProcessTag::SecondMinus => stopped.z_minus.clone().expect("z- present"),
            };
            exits.push(ExitRecord {
                time: stopped.t,
                point,
                process: tag,
            });
            if tag == ProcessTag::Base {
                base_exit_time = Some(stopped.t);
            }
            state = stopped;
            accumulate_sups(&mut stats, &state, spec.eps, &active);
            while next_cp < checkpoints.len() && checkpoints[next_cp] <= state.t + 1e-15 {
                snapshots.push(snapshot_at(checkpoints[next_cp], &state));
                next_cp += 1;
            }
            if spec.trace {
                push_trace(&mut trace, &state);
            }
            let continue_run =
                spec.continue_base_after_perturbed_exit && tag != ProcessTag::Base;
            if continue_run {
                match tag {
                    ProcessTag::Perturbed => {
                        state.y = None;
                        active.perturbed = false;
                    }
                    ProcessTag::SecondPlus => state.z_plus = None,
                    ProcessTag::SecondMinus => state.z_minus = None,
                    ProcessTag::Base => unreachable!(),
                }
                if state.z_plus.is_none() && state.z_minus.is_none() {
                    active.second_perturbed = false;
                }
                continue;
            }
            break StopCause::Exit(tag);
        }

        // Accepted full step.
        accumulate_integrals(&mut stats, &state, domain, cur_dt);
        let region = state.region;
        state = next;
        state.region = region;
        stats.steps += 1;
        accumulate_sups(&mut stats, &state, spec.eps, &active);
        while next_cp < checkpoints.len() && checkpoints[next_cp] <= state.t + 1e-15 {
            snapshots.push(snapshot_at(checkpoints[next_cp], &state));
            next_cp += 1;
        }
        if spec.trace {
            push_trace(&mut trace, &state);
        }
    };

    // Checkpoints past the stop time freeze the stopped state.
    while next_cp < checkpoints.len() {
        snapshots.push(snapshot_at(checkpoints[next_cp], &state));
        next_cp += 1;
    }

    Ok(PathBundle {
        path_index,
        tip: state,
        stop,
        exits,
        stats,
        snapshots,
        trace,
        base_exit_time,
    })
}

fn snapshot_at(t_checkpoint: f64, s: &BundleState) -> Snapshot {
    Snapshot {
        t_checkpoint,
        t_actual: s.t,
        x: s.x.clone(),
        xi: s.xi.clone(),
        eta: s.eta.clone(),
        phi: s.phi,
        p_eps: s.p_eps,
    }
}

fn push_trace(trace: &mut Vec<TraceRow>, s: &BundleState) {
    trace.push(TraceRow {
        t: s.t,
        x: s.x.iter().cloned().collect(),
        xi: s.xi.iter().cloned().collect(),
        eta: s.eta.iter().cloned().collect(),
        phi: s.phi,
        p_eps: s.p_eps,
        region: match s.region {
            RecipeRegion::Boundary => "boundary",
            RecipeRegion::Interior => "interior",
        },
    });
}

fn accumulate_sups(stats: &mut PathStats, state: &BundleState, eps: f64, active: &ProcessSet) {
    let xi_sq = state.xi.norm_squared();
    stats.sup_xi_sq = stats.sup_xi_sq.max(xi_sq);
    let eta_norm = state.eta.norm();
    stats.sup_eta_norm = stats.sup_eta_norm.max(eta_norm);
    let disc = (-state.phi).exp();
    stats.sup_disc_xi_sq = stats.sup_disc_xi_sq.max(disc * xi_sq);
    stats.sup_disc_eta = stats.sup_disc_eta.max(disc * eta_norm);
    let disc_half = (-state.phi + 0.5 * state.t).exp();
    stats.sup_disc_half_xi_sq = stats.sup_disc_half_xi_sq.max(disc_half * xi_sq);
    stats.sup_disc_half_eta = stats.sup_disc_half_eta.max(disc_half * eta_norm);
    if active.perturbed {
        if let Some(y) = &state.y {
            let diff = (y - &state.x).norm();
            stats.sup_y_minus_x = stats.sup_y_minus_x.max(diff);
            if eps > 0.0 {
                let err = ((y - &state.x) / eps - &state.xi).norm();
                stats.sup_first_diff_err = stats.sup_first_diff_err.max(err);
            }
        }
    }
    if active.second_perturbed {
        if let (Some(zp), Some(zm)) = (&state.z_plus, &state.z_minus) {
            if eps > 0.0 {
                let second = (zp + zm - &state.x * 2.0) / (eps * eps);
                let err = (second - &state.eta).norm();
                stats.sup_second_diff_err = stats.sup_second_diff_err.max(err);
            }
        }
    }
}

fn accumulate_integrals(stats: &mut PathStats, state: &BundleState, domain: &Domain, dt: f64) {
    let xi_sq = state.xi.norm_squared();
    let psi = domain.psi(&state.x);
    let psi_xi = domain.grad(&state.x).dot(&state.xi);
    let barrier_term = if psi > 0.0 { (psi_xi / psi).powi(2) } else { 0.0 };
    stats.int_xi_sq += xi_sq * dt;
    stats.int_xi_barrier += (xi_sq + barrier_term) * dt;
    let eta_sq = state.eta.norm_squared();
    stats.int_eta_sq += eta_sq * dt;
    let disc = (-state.phi).exp();
    stats.int_disc_xi_sq += disc * xi_sq * dt;
    stats.int_disc2_eta_sq += disc * disc * eta_sq * dt;
    let disc_half = (-state.phi + 0.5 * state.t).exp();
    stats.int_disc_half_xi_sq += disc_half * xi_sq * dt;
    stats.int_disc2_t_eta_sq += disc * disc * state.t.exp() * eta_sq * dt;
}

/// Runs `n_paths` independent bundles in parallel with a deterministic
/// ordered reduction: results come back indexed by path.
#[allow(clippy::too_many_arguments)]
pub fn run_bundles(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    x0: &VecF,
    xi0: &VecF,
    eta0: &VecF,
    policy: &MarkovPolicy,
    spec: &SimSpec,
    seed: u64,
    n_paths: usize,
) -> Vec<PathBundle> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            simulate_bundle(problem, domain, cond, x0, xi0, eta0, policy, spec, seed, i)
                .expect("start point inside the stopping region")
        })
        .collect()
}

/// Exit-time gap table row: mean of `tau - min(tau, tau_perturbed(eps))`,
/// maximized over the supplied policies, with common random numbers across
/// the epsilon ladder (aborted paths are excluded pairwise).
#[derive(Debug, Clone, Serialize)]
pub struct ExitGapRow {
    pub eps: f64,
    pub gap: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub n_aborted: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn exit_time_gap(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    x0: &VecF,
    xi0: &VecF,
    eps_list: &[f64],
    policies: &[MarkovPolicy],
    spec_base: &SimSpec,
    seed: u64,
    n_paths: usize,
) -> Vec<ExitGapRow> {
    let eta0 = VecF::zeros(problem.d);
    let mut tables: Vec<Vec<Vec<Option<f64>>>> = Vec::new();
    for &eps in eps_list {
        let mut per_policy = Vec::new();
        for policy in policies {
            let mut spec = spec_base.clone();
            spec.eps = eps;
            spec.processes = ProcessSet::with_perturbed();
            spec.continue_base_after_perturbed_exit = true;
            let bundles = run_bundles(
                problem, domain, cond, x0, xi0, &eta0, policy, &spec, seed, n_paths,
            );
            let samples: Vec<Option<f64>> = bundles
                .iter()
                .map(|b| match (&b.stop, b.base_exit_time) {
                    (StopCause::Aborted(_), _) => None,
                    (_, Some(tau_base)) => {
                        let tau_pert = b
                            .exits
                            .iter()
                            .find(|e| e.process == ProcessTag::Perturbed)
                            .map(|e| e.time)
                            .unwrap_or(tau_base);
                        Some((tau_base - tau_base.min(tau_pert)).max(0.0))
                    }
                    // Horizon hit before the base exit: the observable part
                    // of the gap is measured up to the horizon.
                    (_, None) => {
                        let tau_pert = b
                            .exits
                            .iter()
                            .find(|e| e.process == ProcessTag::Perturbed)
                            .map(|e| e.time);
                        match tau_pert {
                            Some(tp) => Some(spec.caps.horizon - tp.min(spec.caps.horizon)),
                            None => Some(0.0),
                        }
                    }
                })
                .collect();
            per_policy.push(samples);
        }
        tables.push(per_policy);
    }
    let mut excluded = vec![false; n_paths];
    for per_policy in &tables {
        for samples in per_policy {
            for (i, s) in samples.iter().enumerate() {
                if s.is_none() {
                    excluded[i] = true;
                }
            }
        }
    }
    let n_aborted = excluded.iter().filter(|&&e| e).count();
    eps_list
        .iter()
        .enumerate()
        .map(|(ei, &eps)| {
            let mut best = f64::NEG_INFINITY;
            let mut best_stderr = 0.0;
            let mut n_used = 0;
            for samples in &tables[ei] {
                let vals: Vec<f64> = samples
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !excluded[*i])
                    .map(|(_, s)| s.unwrap())
                    .collect();
                let (mean, se) = mean_stderr(&vals);
                if mean > best {
                    best = mean;
                    best_stderr = se;
                    n_used = vals.len();
                }
            }
            ExitGapRow {
                eps,
                gap: best,
                stderr: best_stderr,
                n_used,
                n_aborted,
            }
        })
        .collect()
}

/// Per-path trace as CSV: t, x..., xi..., eta..., phi, p_eps, region.
pub fn trace_csv(bundle: &PathBundle, d: usize) -> String {
    let mut header = String::from("t");
    for i in 0..d {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..d {
        header.push_str(&format!(",xi{i}"));
    }
    for i in 0..d {
        header.push_str(&format!(",eta{i}"));
    }
    header.push_str(",phi,p_eps,region\n");
    let mut csv = header;
    for row in &bundle.trace {
        let mut line = row.t.to_string();
        for v in row.x.iter().chain(row.xi.iter()).chain(row.eta.iter()) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        csv.push_str(&format!("{line},{},{},{}\n", row.phi, row.p_eps, row.region));
    }
    csv
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use crate::MatF;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn vx(v: &[f64]) -> VecF {
        VecF::from_column_slice(v)
    }

    fn setup_1d() -> (ControlProblem, Domain, InteriorCondition) {
        (
            builtins::ode1d(),
            builtins::default_domain("ode1d"),
            InteriorCondition::zero(1, 1),
        )
    }

    #[test]
    fn coupling_identity_eps_zero() {
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::full()).with_eps(0.0);
        let b = simulate_bundle(
            &p,
            &dom,
            &cond,
            &vx(&[0.3]),
            &vx(&[1.0]),
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            99,
            0,
        )
        .unwrap();
        // With eps = 0 the perturbed processes coincide with the base path
        // bitwise at the tip.
        assert_eq!(b.tip.y.as_ref().unwrap(), &b.tip.x);
        assert_eq!(b.tip.z_plus.as_ref().unwrap(), &b.tip.x);
        assert_eq!(b.tip.z_minus.as_ref().unwrap(), &b.tip.x);
        assert_eq!(b.stats.sup_y_minus_x, 0.0);
        assert_eq!(b.tip.p_eps, 1.0);
    }

    #[test]
    fn constant_sigma_keeps_xi_exact() {
        let (p, dom, cond) = setup_1d();
        let spec =
            SimSpec::new(ProcessSet::first_order()).with_recipe_mode(RecipeMode::ForceInterior);
        let b = simulate_bundle(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            &vx(&[1.0]),
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            7,
            3,
        )
        .unwrap();
        assert_eq!(b.tip.xi[0], 1.0);
        assert_eq!(b.tip.eta[0], 0.0);
    }

    #[test]
    fn one_step_hand_example() {
        // d = d1 = 1, sigma(x) = x, b = 0, auxiliaries zero, x = 1, xi = 1,
        // dW = 0.1, dt = 0.01: d xi = sigma_(xi) dW = 0.1.
        let p = builtins::linear_sigma_1d();
        let state = BundleState {
            t: 0.0,
            x: vx(&[1.0]),
            y: None,
            z_plus: None,
            z_minus: None,
            xi: vx(&[1.0]),
            eta: vx(&[0.0]),
            phi: 0.0,
            xi_aug: [0.0; 3],
            eta_aug: [0.0; 3],
            p_eps: 1.0,
            payoff_integral: 0.0,
            y_rep_integral: 0.0,
            region: RecipeRegion::Interior,
        };
        let rec = RecipeValues::zero(1, RecipeRegion::Interior);
        let dw = vx(&[0.1]);
        let input = StepInput {
            problem: &p,
            alpha: 0,
            dt: 0.01,
            dw: &dw,
            eps: 0.0,
            recipe: &rec,
        };
        let next = step_bundle(&state, &input, ProcessSet::first_order()).unwrap();
        assert_relative_eq!(next.xi[0], 1.1, epsilon = 1e-14);
        assert_relative_eq!(next.x[0], 1.1, epsilon = 1e-14);
    }

    #[test]
    fn exit_point_lands_on_boundary() {
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::value_only());
        for i in 0..32 {
            let b = simulate_bundle(
                &p,
                &dom,
                &cond,
                &vx(&[0.0]),
                &vx(&[0.0]),
                &vx(&[0.0]),
                &MarkovPolicy::Constant(0),
                &spec,
                1234,
                i,
            )
            .unwrap();
            assert!(b.exited(), "path {i} should exit well before the horizon");
            let exit = &b.exits[0];
            assert!(dom.psi(&exit.point).abs() <= EXIT_TOL * 10.0);
        }
    }

    #[test]
    fn mean_exit_time_matches_ode() {
        // E tau from 0 is (1 - 0)/2 = 0.5 for a = 1.
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::value_only());
        let bundles = run_bundles(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            &vx(&[0.0]),
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            2024,
            10_000,
        );
        let taus: Vec<f64> = bundles.iter().map(|b| b.tip.t).collect();
        let (mean, se) = mean_stderr(&taus);
        assert!(
            (mean - 0.5).abs() <= 3.0 * se + 0.05,
            "mean exit {mean} +- {se}"
        );
    }

    #[test]
    fn immediate_xi_cap() {
        let (p, dom, cond) = setup_1d();
        let caps = Caps {
            xi_cap: 1e-6,
            ..Caps::default()
        };
        let spec = SimSpec::new(ProcessSet::first_order()).with_caps(caps);
        let b = simulate_bundle(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            &vx(&[1.0]),
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            5,
            0,
        )
        .unwrap();
        assert!(b.hit_xi_cap());
        assert_relative_eq!(b.tip.t, 0.0);
    }

    #[test]
    fn gap_zero_at_eps_zero() {
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::with_perturbed());
        let rows = exit_time_gap(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            &vx(&[1.0]),
            &[0.0],
            &[MarkovPolicy::Constant(0)],
            &spec,
            31,
            200,
        );
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].gap, 0.0);
        assert_eq!(rows[0].stderr, 0.0);
    }

    #[test]
    fn determinism_same_seed_same_tip() {
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::full()).with_eps(0.01);
        let run = || {
            simulate_bundle(
                &p,
                &dom,
                &cond,
                &vx(&[0.2]),
                &vx(&[0.5]),
                &vx(&[0.0]),
                &MarkovPolicy::Constant(0),
                &spec,
                77,
                11,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.tip.x, b.tip.x);
        assert_eq!(a.tip.t, b.tip.t);
        assert_eq!(a.tip.p_eps, b.tip.p_eps);
    }

    #[test]
    fn girsanov_weight_positive_and_unit_mean_at_checkpoints() {
        // Boundary recipe on a band; the weight is an exponential
        // martingale, so its mean stays near one at every checkpoint.
        let (p, dom, cond) = setup_1d();
        let checkpoints = vec![0.001, 0.002, 0.004, 0.008, 0.016];
        let spec = SimSpec::new(ProcessSet::with_perturbed())
            .with_eps(0.02)
            .with_stop_region(StopRegion::PsiBand { lo: 0.02, hi: 0.25 })
            .with_recipe_mode(RecipeMode::ForceBoundary)
            .with_checkpoints(checkpoints.clone());
        let x0 = dom.point_at_psi(&vx(&[1.0]), 0.19).unwrap();
        let bundles = run_bundles(
            &p,
            &dom,
            &cond,
            &x0,
            &vx(&[0.05]),
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            404,
            10_000,
        );
        let aborted = bundles.iter().filter(|b| b.aborted()).count();
        assert_eq!(aborted, 0, "aborts with gentle eps: {aborted}");
        for b in &bundles {
            assert!(b.tip.p_eps > 0.0);
        }
        for (k, _t) in checkpoints.iter().enumerate() {
            let weights: Vec<f64> = bundles.iter().map(|b| b.snapshots[k].p_eps).collect();
            let (mean, se) = mean_stderr(&weights);
            assert!(
                (mean - 1.0).abs() <= 3.0 * se + 2e-4,
                "checkpoint {k}: weight mean {mean} +- {se}"
            );
        }
    }

    #[test]
    fn band_stop_respects_both_surfaces() {
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::first_order())
            .with_stop_region(StopRegion::PsiBand { lo: 0.05, hi: 0.25 })
            .with_recipe_mode(RecipeMode::ForceBoundary);
        let x0 = dom.point_at_psi(&vx(&[1.0]), 0.12).unwrap();
        for i in 0..64 {
            let b = simulate_bundle(
                &p,
                &dom,
                &cond,
                &x0,
                &vx(&[0.1]),
                &vx(&[0.0]),
                &MarkovPolicy::Constant(0),
                &spec,
                555,
                i,
            )
            .unwrap();
            if b.exited() {
                let psi = dom.psi(&b.exits[0].point);
                let hit_lo = (psi - 0.05).abs() <= 1e-8;
                let hit_hi = (psi - 0.25).abs() <= 1e-8;
                assert!(hit_lo || hit_hi, "exit psi = {psi}");
            }
        }
    }

    #[test]
    fn snapshots_clamp_after_stop() {
        let (p, dom, cond) = setup_1d();
        let spec = SimSpec::new(ProcessSet::first_order())
            .with_checkpoints(vec![0.01, 0.05, 40.0])
            .with_recipe_mode(RecipeMode::ForceInterior);
        let b = simulate_bundle(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            &vx(&[1.0]),
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            6,
            0,
        )
        .unwrap();
        assert_eq!(b.snapshots.len(), 3);
        // The last checkpoint is far past the exit: frozen at the stop time.
        assert_relative_eq!(b.snapshots[2].t_actual, b.tip.t, epsilon = 1e-12);
        // Early checkpoints land exactly on their times.
        assert_relative_eq!(b.snapshots[0].t_actual, 0.01, epsilon = 1e-9);
    }

    #[test]
    fn interior_recipe_with_nontrivial_witness_runs() {
        let p = builtins::ball2d();
        let dom = builtins::default_domain("ball2d");
        let cond = InteriorCondition::new(
            2,
            Arc::new(|_a, _x| VecF::from_column_slice(&[0.1, -0.2])),
            Arc::new(|_a, _x, y: &VecF| {
                MatF::from_row_slice(2, 2, &[0.0, 0.3 * y[0], -0.3 * y[0], 0.0])
            }),
            Arc::new(|_a, _x| 0.5),
        );
        let spec = SimSpec::new(ProcessSet::full())
            .with_eps(0.05)
            .with_recipe_mode(RecipeMode::ForceInterior)
            .with_stop_region(StopRegion::PsiAbove { lo: 0.0625 });
        let b = simulate_bundle(
            &p,
            &dom,
            &cond,
            &vx(&[0.0, 0.0]),
            &vx(&[1.0, 0.0]),
            &vx(&[0.0, 0.0]),
            &MarkovPolicy::Constant(0),
            &spec,
            8,
            0,
        )
        .unwrap();
        assert!(!b.aborted());
        assert!(b.tip.p_eps.is_finite() && b.tip.p_eps > 0.0);
    }
}
