//! Controlled diffusion data over a finite control set, together with the
//! standing-assumption checkers.
//!
//! A [`ControlProblem`] bundles the diffusion matrix, drift, discount rate,
//! running and terminal payoffs with their first and second spatial
//! derivatives, all indexed by a finite list of controls. Coefficients are
//! black-box maps, so the assumption checkers are sample-based and report a
//! witnessing point on failure rather than attempting formal verification.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Domain;
use crate::{MatF, VecF};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("control index {0} out of range")]
    BadControl(usize),
    #[error("normal nondegeneracy fails: (a n, n) = {value} at x={point:?} under control {control}")]
    Degenerate {
        point: Vec<f64>,
        control: usize,
        value: f64,
    },
    #[error("interior condition fails: slack = {slack} at x={point:?}, y={dir:?}, control {control}")]
    InteriorConditionViolated {
        point: Vec<f64>,
        dir: Vec<f64>,
        control: usize,
        slack: f64,
    },
}

/// Full coefficient interface: values plus first and second directional
/// derivatives in space. `dir2` variants are second derivatives along the
/// same direction twice; mixed directions are not needed by the integrator.
pub trait CoefficientSet: Send + Sync {
    fn sigma(&self, alpha: usize, x: &VecF) -> MatF;
    fn sigma_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF;
    fn sigma_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF;

    fn drift(&self, alpha: usize, x: &VecF) -> VecF;
    fn drift_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF;
    fn drift_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF;

    fn discount(&self, alpha: usize, x: &VecF) -> f64;
    fn discount_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64;
    fn discount_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64;

    fn running(&self, alpha: usize, x: &VecF) -> f64;
    fn running_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64;
    fn running_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64;

    fn terminal(&self, x: &VecF) -> f64;
    fn terminal_grad(&self, x: &VecF) -> VecF;
    fn terminal_hess(&self, x: &VecF) -> MatF;
}

/// Controlled diffusion problem over a finite control list.
///
/// Immutable and cheaply cloneable; checkers and the engine share it across
/// workers.
#[derive(Clone)]
pub struct ControlProblem {
    pub name: String,
    pub controls: Vec<String>,
    pub d: usize,
    pub d1: usize,
    /// Uniform coefficient bound (norms of sigma, b, c up to second
    /// derivatives and the level-function proxy); at least one.
    pub k0: f64,
    /// Accumulated discount shift from [`normalize_discount`]: the intended
    /// value function discounts with `phi_t - shift * t` where `phi_t`
    /// integrates this problem's own discount rate.
    pub discount_shift: f64,
    coef: Arc<dyn CoefficientSet>,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("controls", &self.controls)
            .field("d", &self.d)
            .field("d1", &self.d1)
            .field("k0", &self.k0)
            .field("discount_shift", &self.discount_shift)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        name: impl Into<String>,
        controls: Vec<String>,
        d: usize,
        d1: usize,
        k0: f64,
        coef: Arc<dyn CoefficientSet>,
    ) -> Self {
        assert!(k0 >= 1.0, "coefficient bound must be at least one");
        ControlProblem {
            name: name.into(),
            controls,
            d,
            d1,
            k0,
            discount_shift: 0.0,
            coef,
        }
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn coef(&self) -> &dyn CoefficientSet {
        self.coef.as_ref()
    }

    pub fn sigma(&self, alpha: usize, x: &VecF) -> MatF {
        self.coef.sigma(alpha, x)
    }

    pub fn sigma_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        self.coef.sigma_dir(alpha, x, dir)
    }

    pub fn sigma_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        self.coef.sigma_dir2(alpha, x, dir)
    }

    pub fn drift(&self, alpha: usize, x: &VecF) -> VecF {
        self.coef.drift(alpha, x)
    }

    pub fn drift_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        self.coef.drift_dir(alpha, x, dir)
    }

    pub fn drift_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        self.coef.drift_dir2(alpha, x, dir)
    }

    pub fn discount(&self, alpha: usize, x: &VecF) -> f64 {
        self.coef.discount(alpha, x)
    }

    pub fn discount_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.coef.discount_dir(alpha, x, dir)
    }

    pub fn discount_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.coef.discount_dir2(alpha, x, dir)
    }

    pub fn running(&self, alpha: usize, x: &VecF) -> f64 {
        self.coef.running(alpha, x)
    }

    pub fn running_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.coef.running_dir(alpha, x, dir)
    }

    pub fn running_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.coef.running_dir2(alpha, x, dir)
    }

    pub fn terminal(&self, x: &VecF) -> f64 {
        self.coef.terminal(x)
    }

    pub fn terminal_grad(&self, x: &VecF) -> VecF {
        self.coef.terminal_grad(x)
    }

    pub fn terminal_hess(&self, x: &VecF) -> MatF {
        self.coef.terminal_hess(x)
    }

    /// Diffusion matrix `a = sigma sigma^T / 2`.
    pub fn a(&self, alpha: usize, x: &VecF) -> MatF {
        let s = self.sigma(alpha, x);
        (&s * s.transpose()) * 0.5
    }

    /// `L^alpha psi = tr(a psi_xx) + (b, psi_x)` at `x`.
    pub fn generator_applied(&self, alpha: usize, x: &VecF, domain: &Domain) -> f64 {
        let a = self.a(alpha, x);
        let h = domain.hess(x);
        let g = domain.grad(x);
        let b = self.drift(alpha, x);
        (a * h).trace() + b.dot(&g)
    }

    /// Returns a problem with the discount rate raised by one and the shift
    /// metadata advanced, so estimators recover the same value function
    /// through the deterministic `e^{t}` compensation. The inverse direction
    /// is [`undo_discount_normalization`].
    pub fn normalize_discount(&self) -> ControlProblem {
        let inner = self.coef.clone();
        let shifted = Arc::new(ShiftedDiscount {
            inner,
            shift: 1.0,
        });
        ControlProblem {
            name: self.name.clone(),
            controls: self.controls.clone(),
            d: self.d,
            d1: self.d1,
            k0: self.k0 + 1.0,
            discount_shift: self.discount_shift + 1.0,
            coef: shifted,
        }
    }

    /// Inverse of [`normalize_discount`]: lowers the rate by one and rolls
    /// the shift metadata back.
    pub fn undo_discount_normalization(&self) -> ControlProblem {
        assert!(
            self.discount_shift >= 1.0,
            "no discount normalization to undo"
        );
        let inner = self.coef.clone();
        let shifted = Arc::new(ShiftedDiscount {
            inner,
            shift: -1.0,
        });
        ControlProblem {
            name: self.name.clone(),
            controls: self.controls.clone(),
            d: self.d,
            d1: self.d1,
            k0: self.k0,
            discount_shift: self.discount_shift - 1.0,
            coef: shifted,
        }
    }

    /// Discount rate entering payoff accumulation for the *intended* value
    /// function: the problem's own rate minus the recorded shift.
    pub fn effective_discount(&self, alpha: usize, x: &VecF) -> f64 {
        self.discount(alpha, x) - self.discount_shift
    }

    /// Minimum sampled discount rate, used for the horizon-truncation bias
    /// bound `K0 e^{-inf c * T}`.
    pub fn inf_discount(&self, domain: &Domain, n_samples: usize, seed: u64) -> f64 {
        let pts = domain.sample_interior(n_samples, seed, None);
        let mut worst = f64::INFINITY;
        for x in &pts {
            for alpha in 0..self.n_controls() {
                worst = worst.min(self.effective_discount(alpha, x));
            }
        }
        worst.max(0.0)
    }
}

struct ShiftedDiscount {
    inner: Arc<dyn CoefficientSet>,
    shift: f64,
}

impl CoefficientSet for ShiftedDiscount {
    fn sigma(&self, alpha: usize, x: &VecF) -> MatF {
        self.inner.sigma(alpha, x)
    }
    fn sigma_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        self.inner.sigma_dir(alpha, x, dir)
    }
    fn sigma_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        self.inner.sigma_dir2(alpha, x, dir)
    }
    fn drift(&self, alpha: usize, x: &VecF) -> VecF {
        self.inner.drift(alpha, x)
    }
    fn drift_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        self.inner.drift_dir(alpha, x, dir)
    }
    fn drift_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        self.inner.drift_dir2(alpha, x, dir)
    }
    fn discount(&self, alpha: usize, x: &VecF) -> f64 {
        self.inner.discount(alpha, x) + self.shift
    }
    fn discount_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.inner.discount_dir(alpha, x, dir)
    }
    fn discount_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.inner.discount_dir2(alpha, x, dir)
    }
    fn running(&self, alpha: usize, x: &VecF) -> f64 {
        self.inner.running(alpha, x)
    }
    fn running_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.inner.running_dir(alpha, x, dir)
    }
    fn running_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.inner.running_dir2(alpha, x, dir)
    }
    fn terminal(&self, x: &VecF) -> f64 {
        self.inner.terminal(x)
    }
    fn terminal_grad(&self, x: &VecF) -> VecF {
        self.inner.terminal_grad(x)
    }
    fn terminal_hess(&self, x: &VecF) -> MatF {
        self.inner.terminal_hess(x)
    }
}

/// Witness data for the auxiliary-process interior condition: a vector field
/// `rho`, a skew-matrix field `q` linear in its direction argument, and a
/// scalar field `m`. These enter the interior recipe and the condition
/// checker; the problem data itself never constructs them.
#[derive(Clone)]
pub struct InteriorCondition {
    rho: Arc<dyn Fn(usize, &VecF) -> VecF + Send + Sync>,
    q: Arc<dyn Fn(usize, &VecF, &VecF) -> MatF + Send + Sync>,
    m: Arc<dyn Fn(usize, &VecF) -> f64 + Send + Sync>,
    pub d1: usize,
}

impl InteriorCondition {
    pub fn new(
        d1: usize,
        rho: Arc<dyn Fn(usize, &VecF) -> VecF + Send + Sync>,
        q: Arc<dyn Fn(usize, &VecF, &VecF) -> MatF + Send + Sync>,
        m: Arc<dyn Fn(usize, &VecF) -> f64 + Send + Sync>,
    ) -> Self {
        InteriorCondition { rho, q, m, d1 }
    }

    /// The trivial witness `rho = 0, Q = 0, M = 0`, valid whenever the
    /// coefficient Lipschitz content is already dominated by the discount.
    pub fn zero(d: usize, d1: usize) -> Self {
        InteriorCondition {
            rho: Arc::new(move |_a, _x| VecF::zeros(d)),
            q: Arc::new(move |_a, _x, _y| DMatrix::zeros(d1, d1)),
            m: Arc::new(|_a, _x| 0.0),
            d1,
        }
    }

    pub fn rho(&self, alpha: usize, x: &VecF) -> VecF {
        (self.rho)(alpha, x)
    }

    pub fn q(&self, alpha: usize, x: &VecF, y: &VecF) -> MatF {
        (self.q)(alpha, x, y)
    }

    pub fn m(&self, alpha: usize, x: &VecF) -> f64 {
        (self.m)(alpha, x)
    }

    /// Validates skewness of `Q` and its linearity in the direction argument
    /// on random samples. Returns the worst defect found.
    pub fn validate_q(
        &self,
        problem: &ControlProblem,
        domain: &Domain,
        n_samples: usize,
        seed: u64,
    ) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = domain.sample_interior(n_samples, seed ^ 0x5bd1, None);
        let mut worst_skew = 0.0f64;
        let mut worst_linear = 0.0f64;
        for x in &pts {
            for alpha in 0..problem.n_controls() {
                let y1 = VecF::from_fn(problem.d, |_, _| rng.gen_range(-1.0..1.0));
                let y2 = VecF::from_fn(problem.d, |_, _| rng.gen_range(-1.0..1.0));
                let (c1, c2): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let q1 = self.q(alpha, x, &y1);
                worst_skew = worst_skew.max(crate::linalg::skew_defect(&q1));
                let q2 = self.q(alpha, x, &y2);
                let qc = self.q(alpha, x, &(&y1 * c1 + &y2 * c2));
                let lin_defect = (&q1 * c1 + &q2 * c2 - qc).amax();
                worst_linear = worst_linear.max(lin_defect);
            }
        }
        (worst_skew, worst_linear)
    }
}

/// Minimum of `(a^alpha n, n)` over sampled boundary points and controls,
/// with `n` the unit inward normal. Positive iff the normal nondegeneracy
/// assumption holds on the sample; on a nonpositive result the witnessing
/// point and control are reported in the error.
pub fn check_nondegeneracy_normal(
    problem: &ControlProblem,
    domain: &Domain,
    n_boundary_samples: usize,
    seed: u64,
) -> Result<f64, ProblemError> {
    assert!(n_boundary_samples >= 1);
    let mut pts = domain.sample_boundary(n_boundary_samples, seed);
    // Deterministic axis-extreme points so axis-aligned degeneracies are
    // always witnessed.
    pts.extend(domain.axis_boundary_points());
    let mut best = f64::INFINITY;
    let mut witness: Option<(VecF, usize)> = None;
    for x in &pts {
        let n = domain.inward_normal(x);
        for alpha in 0..problem.n_controls() {
            let a = problem.a(alpha, x);
            let q = (&a * &n).dot(&n);
            if q < best {
                best = q;
                witness = Some((x.clone(), alpha));
            }
        }
    }
    if best <= 0.0 {
        let (x, alpha) = witness.expect("witness recorded");
        return Err(ProblemError::Degenerate {
            point: x.iter().cloned().collect(),
            control: alpha,
            value: best,
        });
    }
    Ok(best)
}

/// Minimum slack of the interior condition over sampled `(alpha, x, |y|=1)`:
///
/// `slack = c + M (a y, y) - ||sigma_(y) + (rho,y) sigma + sigma Q(x,y)||^2
///          - 2 (y, b_(y) + 2 (rho,y) b)`
///
/// Points are drawn from each sub-level set `{psi > lambda}` for the given
/// lambda levels. Nonnegative minimum means the condition holds on the
/// sample; a negative minimum is returned as an error carrying the witness.
pub fn check_interior_condition(
    problem: &ControlProblem,
    cond: &InteriorCondition,
    domain: &Domain,
    lambda_levels: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<f64, ProblemError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut best = f64::INFINITY;
    let mut witness: Option<(VecF, VecF, usize)> = None;
    for (li, &lambda) in lambda_levels.iter().enumerate() {
        let psi_max = domain.psi(&{
            let (lo, hi) = &domain.bounding_box;
            (lo + hi) * 0.5
        });
        let hi = psi_max.max(lambda * 2.0) + 1.0;
        let pts = domain.sample_interior(n_samples, seed.wrapping_add(li as u64), Some((lambda, hi)));
        for x in &pts {
            for alpha in 0..problem.n_controls() {
                let y = random_unit(problem.d, &mut rng);
                let slack = interior_condition_slack(problem, cond, alpha, x, &y);
                if slack < best {
                    best = slack;
                    witness = Some((x.clone(), y.clone(), alpha));
                }
            }
        }
    }
    if best < 0.0 {
        let (x, y, alpha) = witness.expect("witness recorded");
        return Err(ProblemError::InteriorConditionViolated {
            point: x.iter().cloned().collect(),
            dir: y.iter().cloned().collect(),
            control: alpha,
            slack: best,
        });
    }
    Ok(best)
}

/// Pointwise slack of the interior condition (RHS minus LHS).
pub fn interior_condition_slack(
    problem: &ControlProblem,
    cond: &InteriorCondition,
    alpha: usize,
    x: &VecF,
    y: &VecF,
) -> f64 {
    let sigma = problem.sigma(alpha, x);
    let sigma_y = problem.sigma_dir(alpha, x, y);
    let b = problem.drift(alpha, x);
    let b_y = problem.drift_dir(alpha, x, y);
    let rho = cond.rho(alpha, x);
    let q = cond.q(alpha, x, y);
    let m = cond.m(alpha, x);
    let c = problem.discount(alpha, x);
    let rho_y = rho.dot(y);
    let lhs_mat = &sigma_y + &sigma * rho_y + &sigma * &q;
    let lhs = lhs_mat.norm_squared() + 2.0 * y.dot(&(&b_y + &b * (2.0 * rho_y)));
    let a = problem.a(alpha, x);
    let rhs = c + m * (&a * y).dot(y);
    rhs - lhs
}

fn random_unit(d: usize, rng: &mut impl Rng) -> VecF {
    loop {
        let v = VecF::from_fn(d, |_, _| {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            u
        });
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Sampled check of the uniform coefficient bound: per control and entry,
/// sup of value plus first and second directional derivative magnitudes of
/// sigma, drift and discount, plus the level-function norm proxy, against
/// `K0`. Returns the worst sampled sum.
pub fn check_coefficient_bound(
    problem: &ControlProblem,
    domain: &Domain,
    n_samples: usize,
    seed: u64,
) -> (f64, bool) {
    let pts = domain.sample_interior(n_samples, seed, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a);
    let mut sigma_norm = 0.0f64;
    let mut drift_norm = 0.0f64;
    let mut disc_norm = 0.0f64;
    let mut psi_norm = 0.0f64;
    for x in &pts {
        let dir = random_unit(problem.d, &mut rng);
        for alpha in 0..problem.n_controls() {
            let s0 = problem.sigma(alpha, x).amax();
            let s1 = problem.sigma_dir(alpha, x, &dir).amax();
            let s2 = problem.sigma_dir2(alpha, x, &dir).amax();
            sigma_norm = sigma_norm.max(s0 + s1 + s2);
            let b0 = problem.drift(alpha, x).amax();
            let b1 = problem.drift_dir(alpha, x, &dir).amax();
            let b2 = problem.drift_dir2(alpha, x, &dir).amax();
            drift_norm = drift_norm.max(b0 + b1 + b2);
            let c0 = problem.discount(alpha, x).abs();
            let c1 = problem.discount_dir(alpha, x, &dir).abs();
            let c2 = problem.discount_dir2(alpha, x, &dir).abs();
            disc_norm = disc_norm.max(c0 + c1 + c2);
        }
        let psi = domain.psi(x).abs();
        let g = domain.grad(x).amax();
        let h = domain.hess(x).amax();
        let third = domain
            .third(x)
            .map(|t| t.iter().map(|m| m.amax()).fold(0.0f64, f64::max))
            .unwrap_or(0.0);
        psi_norm = psi_norm.max(psi + g + h + third);
    }
    let worst = sigma_norm + drift_norm + disc_norm + psi_norm;
    (worst, worst <= problem.k0)
}

/// Coefficient set built from closures; the usual way to define analytic
/// benchmark problems.
pub struct ClosureCoefficients {
    pub sigma: Box<dyn Fn(usize, &VecF) -> MatF + Send + Sync>,
    pub sigma_dir: Box<dyn Fn(usize, &VecF, &VecF) -> MatF + Send + Sync>,
    pub sigma_dir2: Box<dyn Fn(usize, &VecF, &VecF) -> MatF + Send + Sync>,
    pub drift: Box<dyn Fn(usize, &VecF) -> VecF + Send + Sync>,
    pub drift_dir: Box<dyn Fn(usize, &VecF, &VecF) -> VecF + Send + Sync>,
    pub drift_dir2: Box<dyn Fn(usize, &VecF, &VecF) -> VecF + Send + Sync>,
    pub discount: Box<dyn Fn(usize, &VecF) -> f64 + Send + Sync>,
    pub discount_dir: Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync>,
    pub discount_dir2: Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync>,
    pub running: Box<dyn Fn(usize, &VecF) -> f64 + Send + Sync>,
    pub running_dir: Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync>,
    pub running_dir2: Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync>,
    pub terminal: Box<dyn Fn(&VecF) -> f64 + Send + Sync>,
    pub terminal_grad: Box<dyn Fn(&VecF) -> VecF + Send + Sync>,
    pub terminal_hess: Box<dyn Fn(&VecF) -> MatF + Send + Sync>,
}

impl CoefficientSet for ClosureCoefficients {
    fn sigma(&self, alpha: usize, x: &VecF) -> MatF {
        (self.sigma)(alpha, x)
    }
    fn sigma_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        (self.sigma_dir)(alpha, x, dir)
    }
    fn sigma_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        (self.sigma_dir2)(alpha, x, dir)
    }
    fn drift(&self, alpha: usize, x: &VecF) -> VecF {
        (self.drift)(alpha, x)
    }
    fn drift_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        (self.drift_dir)(alpha, x, dir)
    }
    fn drift_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        (self.drift_dir2)(alpha, x, dir)
    }
    fn discount(&self, alpha: usize, x: &VecF) -> f64 {
        (self.discount)(alpha, x)
    }
    fn discount_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        (self.discount_dir)(alpha, x, dir)
    }
    fn discount_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        (self.discount_dir2)(alpha, x, dir)
    }
    fn running(&self, alpha: usize, x: &VecF) -> f64 {
        (self.running)(alpha, x)
    }
    fn running_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        (self.running_dir)(alpha, x, dir)
    }
    fn running_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        (self.running_dir2)(alpha, x, dir)
    }
    fn terminal(&self, x: &VecF) -> f64 {
        (self.terminal)(x)
    }
    fn terminal_grad(&self, x: &VecF) -> VecF {
        (self.terminal_grad)(x)
    }
    fn terminal_hess(&self, x: &VecF) -> MatF {
        (self.terminal_hess)(x)
    }
}
