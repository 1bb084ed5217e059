//! Value and derivative estimators over path bundles.
//!
//! Three routes to interior derivatives are provided: common-random-number
//! central differences of the value estimator, the pathwise quasiderivative
//! representations evaluated at the stopping point through a value provider,
//! and direct grid-oracle differentiation (see [`crate::oracle`]). The
//! provider abstraction exists because the pathwise representations need
//! `v` and its derivatives at the stopping point: exact closed forms on
//! analytic benchmarks, grid interpolation, or boundary-data-only mode with
//! an explicit uncertainty band for the unknown normal derivative.

use serde::Serialize;
use thiserror::Error;

use crate::builtins::AnalyticSolution;
use crate::engine::{
    exit_time_gap, mean_stderr, run_bundles, Caps, ExitGapRow, MarkovPolicy, PathBundle,
    ProcessSet, SimSpec, StopCause,
};
use crate::geometry::{Domain, Levels};
use crate::problem::{ControlProblem, InteriorCondition};
use crate::recipe::RecipeMode;
use crate::{MatF, VecF};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("perturbed start point leaves the domain")]
    InvalidPerturbation,
    #[error("value provider cannot serve an interior stopping point at {point:?}")]
    MissingBoundaryGradient { point: Vec<f64> },
    #[error("provider failure: {0}")]
    Provider(String),
}

/// Monte Carlo estimate with truncation diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Fraction of paths stopped by the quasiderivative cap.
    pub truncated_fraction: f64,
    /// Fraction of paths stopped by the horizon.
    pub horizon_fraction: f64,
    /// Fraction of paths aborted by the integrator.
    pub aborted_fraction: f64,
    /// Bias bound contributed by horizon-truncated paths:
    /// `horizon_fraction * K0 * exp(-inf c * T)`.
    pub horizon_bias_bound: f64,
    /// Extra uncertainty from a boundary-only value provider.
    pub provider_band: f64,
}

impl Estimate {
    fn from_samples(
        samples: &[f64],
        bundles: &[PathBundle],
        problem: &ControlProblem,
        inf_c: f64,
        horizon: f64,
    ) -> Estimate {
        let (mean, stderr) = mean_stderr(samples);
        let n = bundles.len().max(1);
        let truncated = bundles.iter().filter(|b| b.hit_xi_cap()).count() as f64 / n as f64;
        let horizon_frac = bundles.iter().filter(|b| b.hit_horizon()).count() as f64 / n as f64;
        let aborted = bundles.iter().filter(|b| b.aborted()).count() as f64 / n as f64;
        Estimate {
            mean,
            stderr,
            n_paths: samples.len(),
            truncated_fraction: truncated,
            horizon_fraction: horizon_frac,
            aborted_fraction: aborted,
            horizon_bias_bound: horizon_frac * problem.k0 * (-inf_c * horizon).exp(),
            provider_band: 0.0,
        }
    }
}

/// Interface supplying `v`, its gradient, and (when needed) its Hessian at
/// stopping points of the bundles.
pub trait ValueProvider: Send + Sync {
    fn value(&self, x: &VecF) -> Result<f64, EstimatorError>;
    fn gradient(&self, x: &VecF) -> Result<VecF, EstimatorError>;
    fn hessian(&self, x: &VecF) -> Result<MatF, EstimatorError>;
    /// Uncertainty band on the supplied gradient (per unit direction norm).
    fn gradient_band(&self, _x: &VecF) -> f64 {
        0.0
    }
}

/// Exact closed form on analytic benchmarks.
pub struct AnalyticProvider(pub AnalyticSolution);

impl ValueProvider for AnalyticProvider {
    fn value(&self, x: &VecF) -> Result<f64, EstimatorError> {
        Ok(self.0.value_at(x))
    }
    fn gradient(&self, x: &VecF) -> Result<VecF, EstimatorError> {
        Ok(self.0.grad_at(x))
    }
    fn hessian(&self, x: &VecF) -> Result<MatF, EstimatorError> {
        Ok(self.0.hess_at(x))
    }
}

/// Boundary-data-only mode: serves exit points through the terminal payoff
/// and its tangential derivatives; the unknown normal derivative enters as
/// an uncertainty band scaled by the normal-derivative bound
/// `K (|g|_2 + sup |f|)`.
pub struct BoundaryDataProvider {
    problem: ControlProblem,
    domain: Domain,
    band: f64,
    boundary_tol: f64,
}

impl BoundaryDataProvider {
    pub fn new(problem: &ControlProblem, domain: &Domain, k_normal: f64, seed: u64) -> Self {
        // |g|_2 proxy and sup |f| by interior sampling.
        let pts = domain.sample_interior(512, seed, None);
        let mut g2 = 0.0f64;
        let mut f_sup = 0.0f64;
        for x in &pts {
            let g = problem.terminal(x).abs();
            let gg = problem.terminal_grad(x).norm();
            let gh = problem.terminal_hess(x).amax();
            g2 = g2.max(g + gg + gh);
            for alpha in 0..problem.n_controls() {
                f_sup = f_sup.max(problem.running(alpha, x).abs());
            }
        }
        BoundaryDataProvider {
            problem: problem.clone(),
            domain: domain.clone(),
            band: k_normal * (g2 + f_sup),
            boundary_tol: 1e-6,
        }
    }

    fn require_boundary(&self, x: &VecF) -> Result<(), EstimatorError> {
        if self.domain.psi(x).abs() <= self.boundary_tol {
            Ok(())
        } else {
            Err(EstimatorError::MissingBoundaryGradient {
                point: x.iter().cloned().collect(),
            })
        }
    }
}

impl ValueProvider for BoundaryDataProvider {
    fn value(&self, x: &VecF) -> Result<f64, EstimatorError> {
        self.require_boundary(x)?;
        Ok(self.problem.terminal(x))
    }
    fn gradient(&self, x: &VecF) -> Result<VecF, EstimatorError> {
        self.require_boundary(x)?;
        let g = self.problem.terminal_grad(x);
        let n = self.domain.inward_normal(x);
        // Tangential part only; the normal part is covered by the band.
        Ok(&g - &n * g.dot(&n))
    }
    fn hessian(&self, _x: &VecF) -> Result<MatF, EstimatorError> {
        Err(EstimatorError::Provider(
            "boundary-data provider has no Hessian".into(),
        ))
    }
    fn gradient_band(&self, _x: &VecF) -> f64 {
        self.band
    }
}

/// Settings for the pathwise (quasiderivative) estimators.
#[derive(Debug, Clone)]
pub struct QuasiConfig {
    pub caps: Caps,
    pub levels: Levels,
    pub upsilon_floor: f64,
    pub recipe_mode: RecipeMode,
}

impl Default for QuasiConfig {
    fn default() -> Self {
        QuasiConfig {
            caps: Caps::default(),
            levels: Levels::default(),
            upsilon_floor: 1e-9,
            recipe_mode: RecipeMode::Auto,
        }
    }
}

impl QuasiConfig {
    /// Floor the noise projection at `1e-3 * delta0` given the measured
    /// normal nondegeneracy level.
    pub fn with_delta0(mut self, delta0: f64) -> Self {
        self.upsilon_floor = 1e-3 * delta0;
        self
    }
}

/// Discounted payoff of one bundle: terminal payoff at the exit point plus
/// the accumulated running integral; truncated paths contribute the integral
/// alone and are flagged through the estimate's diagnostics.
pub fn bundle_payoff(problem: &ControlProblem, bundle: &PathBundle) -> f64 {
    match &bundle.stop {
        StopCause::Exit(_) => {
            let exit = bundle
                .exits
                .iter()
                .find(|e| e.process == crate::engine::ProcessTag::Base)
                .unwrap_or(&bundle.exits[0]);
            let disc = (-(bundle.tip.phi - problem.discount_shift * bundle.tip.t)).exp();
            problem.terminal(&exit.point) * disc + bundle.tip.payoff_integral
        }
        _ => bundle.tip.payoff_integral,
    }
}

/// Monte Carlo estimate of the value function at `x0` under a fixed policy.
pub fn estimate_value(
    problem: &ControlProblem,
    domain: &Domain,
    x0: &VecF,
    policy: &MarkovPolicy,
    n_paths: usize,
    caps: Caps,
    seed: u64,
) -> Estimate {
    let cond = InteriorCondition::zero(problem.d, problem.d1);
    let spec = SimSpec::new(ProcessSet::value_only()).with_caps(caps);
    let zero = VecF::zeros(problem.d);
    let bundles = run_bundles(
        problem, domain, &cond, x0, &zero, &zero, policy, &spec, seed, n_paths,
    );
    let samples: Vec<f64> = bundles.iter().map(|b| bundle_payoff(problem, b)).collect();
    let inf_c = problem.inf_discount(domain, 256, seed ^ 0xc0ffee);
    Estimate::from_samples(&samples, &bundles, problem, inf_c, caps.horizon)
}

/// Maximum of [`estimate_value`] over a finite policy set with common random
/// numbers; reports the argmax policy index alongside.
pub fn estimate_value_sup(
    problem: &ControlProblem,
    domain: &Domain,
    x0: &VecF,
    policies: &[MarkovPolicy],
    n_paths: usize,
    caps: Caps,
    seed: u64,
) -> (Estimate, usize) {
    assert!(!policies.is_empty(), "policy set must be nonempty");
    let mut best: Option<(Estimate, usize)> = None;
    for (i, policy) in policies.iter().enumerate() {
        let est = estimate_value(problem, domain, x0, policy, n_paths, caps, seed);
        let better = match &best {
            None => true,
            Some((cur, _)) => est.mean > cur.mean,
        };
        if better {
            best = Some((est, i));
        }
    }
    best.expect("nonempty policy set")
}

/// Common-random-number central difference of the value along `xi`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_first_derivative_fd(
    problem: &ControlProblem,
    domain: &Domain,
    x0: &VecF,
    xi: &VecF,
    eps: f64,
    policy: &MarkovPolicy,
    n_paths: usize,
    caps: Caps,
    seed: u64,
) -> Result<Estimate, EstimatorError> {
    let xp = x0 + xi * eps;
    let xm = x0 - xi * eps;
    if !domain.contains(&xp) || !domain.contains(&xm) {
        return Err(EstimatorError::InvalidPerturbation);
    }
    let cond = InteriorCondition::zero(problem.d, problem.d1);
    let spec = SimSpec::new(ProcessSet::value_only()).with_caps(caps);
    let zero = VecF::zeros(problem.d);
    let plus = run_bundles(
        problem, domain, &cond, &xp, &zero, &zero, policy, &spec, seed, n_paths,
    );
    let minus = run_bundles(
        problem, domain, &cond, &xm, &zero, &zero, policy, &spec, seed, n_paths,
    );
    let samples: Vec<f64> = plus
        .iter()
        .zip(minus.iter())
        .map(|(bp, bm)| (bundle_payoff(problem, bp) - bundle_payoff(problem, bm)) / (2.0 * eps))
        .collect();
    let inf_c = problem.inf_discount(domain, 256, seed ^ 0xc0ffee);
    Ok(Estimate::from_samples(
        &samples, &plus, problem, inf_c, caps.horizon,
    ))
}

/// Common-random-number second central difference of the value along `xi`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_second_derivative_fd(
    problem: &ControlProblem,
    domain: &Domain,
    x0: &VecF,
    xi: &VecF,
    eps: f64,
    policy: &MarkovPolicy,
    n_paths: usize,
    caps: Caps,
    seed: u64,
) -> Result<Estimate, EstimatorError> {
    let xp = x0 + xi * eps;
    let xm = x0 - xi * eps;
    if !domain.contains(&xp) || !domain.contains(&xm) {
        return Err(EstimatorError::InvalidPerturbation);
    }
    let cond = InteriorCondition::zero(problem.d, problem.d1);
    let spec = SimSpec::new(ProcessSet::value_only()).with_caps(caps);
    let zero = VecF::zeros(problem.d);
    let plus = run_bundles(
        problem, domain, &cond, &xp, &zero, &zero, policy, &spec, seed, n_paths,
    );
    let center = run_bundles(
        problem, domain, &cond, x0, &zero, &zero, policy, &spec, seed, n_paths,
    );
    let minus = run_bundles(
        problem, domain, &cond, &xm, &zero, &zero, policy, &spec, seed, n_paths,
    );
    let samples: Vec<f64> = (0..n_paths)
        .map(|i| {
            (bundle_payoff(problem, &plus[i]) - 2.0 * bundle_payoff(problem, &center[i])
                + bundle_payoff(problem, &minus[i]))
                / (eps * eps)
        })
        .collect();
    let inf_c = problem.inf_discount(domain, 256, seed ^ 0xc0ffee);
    Ok(Estimate::from_samples(
        &samples, &center, problem, inf_c, caps.horizon,
    ))
}

/// Pathwise first-derivative representation at the stopping point:
/// `disc * (v_(xi) + (xi_aug0 + xi_aug1) v) + xi_aug2`.
pub fn first_derivative_representation(
    disc: f64,
    v: f64,
    grad_dot_xi: f64,
    xi_aug: [f64; 3],
) -> f64 {
    disc * (grad_dot_xi + (xi_aug[0] + xi_aug[1]) * v) + xi_aug[2]
}

/// Pathwise second-derivative representation at the stopping point.
#[allow(clippy::too_many_arguments)]
pub fn second_derivative_representation(
    disc: f64,
    v: f64,
    grad_dot_xi: f64,
    grad_dot_eta: f64,
    hess_xi_xi: f64,
    xi_aug: [f64; 3],
    eta_aug: [f64; 3],
    y_rep_integral: f64,
) -> f64 {
    let xi_tilde0 = xi_aug[0] + xi_aug[1];
    let eta_tilde0 =
        eta_aug[1] + 2.0 * xi_aug[1] * xi_aug[0] + xi_aug[0] * xi_aug[0] + eta_aug[0];
    disc * (hess_xi_xi + grad_dot_eta + 2.0 * xi_tilde0 * grad_dot_xi + eta_tilde0 * v)
        + y_rep_integral
}

/// Pathwise (quasiderivative-representation) estimator of `v_(xi)(x0)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_first_derivative_quasi(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    x0: &VecF,
    xi: &VecF,
    policy: &MarkovPolicy,
    n_paths: usize,
    config: &QuasiConfig,
    seed: u64,
    provider: &dyn ValueProvider,
) -> Result<Estimate, EstimatorError> {
    let spec = SimSpec::new(ProcessSet::first_order())
        .with_caps(config.caps)
        .with_levels(config.levels)
        .with_recipe_mode(config.recipe_mode)
        .with_upsilon_floor(config.upsilon_floor);
    let eta0 = VecF::zeros(problem.d);
    let bundles = run_bundles(
        problem, domain, cond, x0, xi, &eta0, policy, &spec, seed, n_paths,
    );
    let mut samples = Vec::with_capacity(n_paths);
    let mut band_acc = 0.0f64;
    for b in &bundles {
        if b.aborted() {
            continue;
        }
        let xg = stop_point(b);
        let v = provider.value(&xg)?;
        let grad = provider.gradient(&xg)?;
        let disc = (-b.effective_phi(problem)).exp();
        samples.push(first_derivative_representation(
            disc,
            v,
            grad.dot(&b.tip.xi),
            b.tip.xi_aug,
        ));
        let band = provider.gradient_band(&xg);
        if band > 0.0 {
            let n = domain.inward_normal(&xg);
            band_acc += disc * band * b.tip.xi.dot(&n).abs();
        }
    }
    let inf_c = problem.inf_discount(domain, 256, seed ^ 0xc0ffee);
    let mut est = Estimate::from_samples(&samples, &bundles, problem, inf_c, config.caps.horizon);
    est.provider_band = band_acc / samples.len().max(1) as f64;
    Ok(est)
}

/// Pathwise estimator of `v_(xi)(xi)(x0)`; the second quasiderivative starts
/// at zero, matching the representation's usage.
#[allow(clippy::too_many_arguments)]
pub fn estimate_second_derivative_quasi(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    x0: &VecF,
    xi: &VecF,
    policy: &MarkovPolicy,
    n_paths: usize,
    config: &QuasiConfig,
    seed: u64,
    provider: &dyn ValueProvider,
) -> Result<Estimate, EstimatorError> {
    let spec = SimSpec::new(ProcessSet::second_order())
        .with_caps(config.caps)
        .with_levels(config.levels)
        .with_recipe_mode(config.recipe_mode)
        .with_upsilon_floor(config.upsilon_floor);
    let eta0 = VecF::zeros(problem.d);
    let bundles = run_bundles(
        problem, domain, cond, x0, xi, &eta0, policy, &spec, seed, n_paths,
    );
    let mut samples = Vec::with_capacity(n_paths);
    let mut band_acc = 0.0f64;
    for b in &bundles {
        if b.aborted() {
            continue;
        }
        let xg = stop_point(b);
        let v = provider.value(&xg)?;
        let grad = provider.gradient(&xg)?;
        let hess = provider.hessian(&xg)?;
        let disc = (-b.effective_phi(problem)).exp();
        samples.push(second_derivative_representation(
            disc,
            v,
            grad.dot(&b.tip.xi),
            grad.dot(&b.tip.eta),
            (&hess * &b.tip.xi).dot(&b.tip.xi),
            b.tip.xi_aug,
            b.tip.eta_aug,
            b.tip.y_rep_integral,
        ));
        let band = provider.gradient_band(&xg);
        if band > 0.0 {
            let n = domain.inward_normal(&xg);
            band_acc += disc * band * b.tip.eta.dot(&n).abs();
        }
    }
    let inf_c = problem.inf_discount(domain, 256, seed ^ 0xc0ffee);
    let mut est = Estimate::from_samples(&samples, &bundles, problem, inf_c, config.caps.horizon);
    est.provider_band = band_acc / samples.len().max(1) as f64;
    Ok(est)
}

fn stop_point(b: &PathBundle) -> VecF {
    match &b.stop {
        StopCause::Exit(_) => b
            .exits
            .iter()
            .find(|e| e.process == crate::engine::ProcessTag::Base)
            .map(|e| e.point.clone())
            .unwrap_or_else(|| b.tip.x.clone()),
        _ => b.tip.x.clone(),
    }
}

/// One row of the perturbed-path convergence probe.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub eps: f64,
    /// mean over seeds of sup_t |y(eps) - x|
    pub sup_y_diff: f64,
    /// mean over seeds of sup_t |(y(eps) - x)/eps - xi|
    pub sup_first_err: f64,
    /// mean over seeds of sup_t |(z(eps) - 2x + z(-eps))/eps^2 - eta|
    pub sup_second_err: f64,
    pub n_seeds_used: usize,
    pub n_aborted: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// err(eps_i) / err(eps_{i+1}) per consecutive pair, first differences.
    pub first_ratios: Vec<f64>,
    /// Same for the second differences.
    pub second_ratios: Vec<f64>,
    pub first_monotone: bool,
    pub second_monotone: bool,
}

/// Pathwise convergence probe: fixed seeds across the epsilon ladder, sups
/// along each bundle, paired abort exclusion, monotonicity verdicts.
#[allow(clippy::too_many_arguments)]
pub fn convergence_probe(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    x0: &VecF,
    xi: &VecF,
    eps_list: &[f64],
    n_seeds: usize,
    spec_base: &SimSpec,
    seed: u64,
) -> ProbeReport {
    let eta0 = VecF::zeros(problem.d);
    let mut per_eps: Vec<Vec<Option<(f64, f64, f64)>>> = Vec::new();
    for &eps in eps_list {
        let mut spec = spec_base.clone();
        spec.eps = eps;
        spec.processes = ProcessSet::full();
        let bundles = run_bundles(
            problem,
            domain,
            cond,
            x0,
            xi,
            &eta0,
            &MarkovPolicy::Constant(0),
            &spec,
            seed,
            n_seeds,
        );
        per_eps.push(
            bundles
                .iter()
                .map(|b| {
                    if b.aborted() {
                        None
                    } else if eps == 0.0 {
                        Some((0.0, 0.0, 0.0))
                    } else {
                        Some((
                            b.stats.sup_y_minus_x,
                            b.stats.sup_first_diff_err,
                            b.stats.sup_second_diff_err,
                        ))
                    }
                })
                .collect(),
        );
    }
    let mut excluded = vec![false; n_seeds];
    for col in &per_eps {
        for (i, s) in col.iter().enumerate() {
            if s.is_none() {
                excluded[i] = true;
            }
        }
    }
    let n_aborted = excluded.iter().filter(|&&e| e).count();
    let rows: Vec<ProbeRow> = eps_list
        .iter()
        .enumerate()
        .map(|(ei, &eps)| {
            let vals: Vec<(f64, f64, f64)> = per_eps[ei]
                .iter()
                .enumerate()
                .filter(|(i, _)| !excluded[*i])
                .map(|(_, s)| s.unwrap())
                .collect();
            let n = vals.len().max(1) as f64;
            ProbeRow {
                eps,
                sup_y_diff: vals.iter().map(|v| v.0).sum::<f64>() / n,
                sup_first_err: vals.iter().map(|v| v.1).sum::<f64>() / n,
                sup_second_err: vals.iter().map(|v| v.2).sum::<f64>() / n,
                n_seeds_used: vals.len(),
                n_aborted,
            }
        })
        .collect();
    let ratio = |f: fn(&ProbeRow) -> f64| -> Vec<f64> {
        rows.windows(2)
            .map(|w| {
                let denom = f(&w[1]);
                if denom > 0.0 {
                    f(&w[0]) / denom
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    };
    let first_ratios = ratio(|r| r.sup_first_err);
    let second_ratios = ratio(|r| r.sup_second_err);
    let first_monotone = rows
        .windows(2)
        .all(|w| w[0].sup_first_err >= w[1].sup_first_err);
    let second_monotone = rows
        .windows(2)
        .all(|w| w[0].sup_second_err >= w[1].sup_second_err);
    ProbeReport {
        rows,
        first_ratios,
        second_ratios,
        first_monotone,
        second_monotone,
    }
}

/// Re-export of the engine's exit-time gap estimator for API symmetry.
#[allow(clippy::too_many_arguments)]
pub fn exit_time_gap_table(
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
    exit_time_gap(
        problem, domain, cond, x0, xi0, eps_list, policies, spec_base, seed, n_paths,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    fn vx(v: &[f64]) -> VecF {
        VecF::from_column_slice(v)
    }

    #[test]
    fn constant_terminal_payoff_is_exact() {
        // g(x) = x^2 equals one on both endpoints of (-1, 1), so with
        // f = c = 0 every exited path pays exactly one.
        let p = builtins::quadratic_terminal_1d();
        let dom = builtins::default_domain("ode1d");
        let est = estimate_value(
            &p,
            &dom,
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            400,
            Caps::default(),
            9,
        );
        assert_eq!(est.horizon_fraction, 0.0);
        assert!((est.mean - 1.0).abs() <= 1e-9, "{}", est.mean);
        assert!(est.stderr <= 1e-9);
    }

    #[test]
    fn zero_with_pure_discount() {
        // c = 1, f = 0, g = 0: payoff identically zero.
        let q = builtins::steep_sigma_1d(0.5);
        let dom = builtins::default_domain("ode1d");
        let est = estimate_value(
            &q,
            &dom,
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            200,
            Caps::default(),
            3,
        );
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn value_benchmark_1d() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let est = estimate_value(
            &p,
            &dom,
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            10_000,
            Caps::default(),
            42,
        );
        assert!(
            (est.mean - 0.5).abs() <= 3.0 * est.stderr + 0.05,
            "v(0) = {} +- {}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn discount_normalization_round_trip() {
        // Estimating through the shifted problem recovers the same value
        // within Monte Carlo resolution (common seeds on both pipelines).
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let caps = Caps::default();
        let direct = estimate_value(
            &p,
            &dom,
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            4000,
            caps,
            7,
        );
        let shifted = p.normalize_discount();
        let via = estimate_value(
            &shifted,
            &dom,
            &vx(&[0.0]),
            &MarkovPolicy::Constant(0),
            4000,
            caps,
            7,
        );
        let tol = 2.0 * (direct.stderr.powi(2) + via.stderr.powi(2)).sqrt() + 1e-9;
        assert!(
            (direct.mean - via.mean).abs() <= tol,
            "direct {} vs shifted {} (tol {tol})",
            direct.mean,
            via.mean
        );
    }

    #[test]
    fn sup_estimator_single_policy_degenerates() {
        let p = builtins::twocontrol1d(-1.0);
        let dom = builtins::default_domain("twocontrol1d");
        let caps = Caps::default();
        let single = estimate_value(
            &p,
            &dom,
            &vx(&[0.0]),
            &MarkovPolicy::Constant(1),
            500,
            caps,
            5,
        );
        let (sup, arg) = estimate_value_sup(
            &p,
            &dom,
            &vx(&[0.0]),
            &[MarkovPolicy::Constant(1)],
            500,
            caps,
            5,
        );
        assert_eq!(arg, 0);
        assert_relative_eq!(single.mean, sup.mean, epsilon = 1e-15);
    }

    #[test]
    fn sup_estimator_monotone_under_policy_addition() {
        let p = builtins::twocontrol1d(-1.0);
        let dom = builtins::default_domain("twocontrol1d");
        let caps = Caps::default();
        let (small, _) = estimate_value_sup(
            &p,
            &dom,
            &vx(&[0.0]),
            &[MarkovPolicy::Constant(0)],
            500,
            caps,
            5,
        );
        let (big, arg) = estimate_value_sup(
            &p,
            &dom,
            &vx(&[0.0]),
            &[MarkovPolicy::Constant(0), MarkovPolicy::Constant(1)],
            500,
            caps,
            5,
        );
        assert!(big.mean >= small.mean);
        assert_eq!(arg, 1); // larger diffusion exits faster, f = -1
    }

    #[test]
    fn fd_derivative_symmetric_at_center() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let est = estimate_first_derivative_fd(
            &p,
            &dom,
            &vx(&[0.0]),
            &vx(&[1.0]),
            0.05,
            &MarkovPolicy::Constant(0),
            4000,
            Caps::default(),
            11,
        )
        .unwrap();
        assert!(est.mean.abs() <= 3.0 * est.stderr + 1e-3, "{}", est.mean);
    }

    #[test]
    fn fd_rejects_perturbation_outside() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let err = estimate_first_derivative_fd(
            &p,
            &dom,
            &vx(&[0.99]),
            &vx(&[1.0]),
            0.05,
            &MarkovPolicy::Constant(0),
            10,
            Caps::default(),
            11,
        );
        assert!(matches!(err, Err(EstimatorError::InvalidPerturbation)));
    }

    #[test]
    fn representation_degenerates_without_sources() {
        // f = c = 0 and zero augmented coordinates: the representation is
        // exactly the directional derivative term.
        let got = first_derivative_representation(1.0, 123.0, -0.75, [0.0, 0.0, 0.0]);
        assert_eq!(got, -0.75);
        let got2 =
            second_derivative_representation(1.0, 9.0, 3.0, 0.0, 2.5, [0.0; 3], [0.0; 3], 0.0);
        assert_eq!(got2, 2.5);
    }

    #[test]
    fn linear_terminal_gradient_is_exact() {
        // sigma constant, b = 0, auxiliaries zero, f = c = 0, g linear:
        // the pathwise estimate equals the constant gradient of g with zero
        // variance.
        use crate::problem::ClosureCoefficients;
        let coef = ClosureCoefficients {
            sigma: Box::new(|_a, _x| DMatrix::from_element(1, 1, 2.0f64.sqrt())),
            sigma_dir: Box::new(|_a, _x, _d| DMatrix::zeros(1, 1)),
            sigma_dir2: Box::new(|_a, _x, _d| DMatrix::zeros(1, 1)),
            drift: Box::new(|_a, _x| DVector::zeros(1)),
            drift_dir: Box::new(|_a, _x, _d| DVector::zeros(1)),
            drift_dir2: Box::new(|_a, _x, _d| DVector::zeros(1)),
            discount: Box::new(|_a, _x| 0.0),
            discount_dir: Box::new(|_a, _x, _d| 0.0),
            discount_dir2: Box::new(|_a, _x, _d| 0.0),
            running: Box::new(|_a, _x| 0.0),
            running_dir: Box::new(|_a, _x, _d| 0.0),
            running_dir2: Box::new(|_a, _x, _d| 0.0),
            terminal: Box::new(|x: &VecF| 3.0 * x[0] + 1.0),
            terminal_grad: Box::new(|_x| DVector::from_element(1, 3.0)),
            terminal_hess: Box::new(|_x| DMatrix::zeros(1, 1)),
        };
        let p = crate::problem::ControlProblem::new(
            "linear-terminal",
            vec!["0".into()],
            1,
            1,
            8.0,
            Arc::new(coef),
        );
        let dom = builtins::default_domain("ode1d");
        let cond = InteriorCondition::zero(1, 1);
        let sol = AnalyticSolution {
            value: Arc::new(|x: &VecF| 3.0 * x[0] + 1.0),
            grad: Arc::new(|_x| DVector::from_element(1, 3.0)),
            hess: Arc::new(|_x| DMatrix::zeros(1, 1)),
        };
        let provider = AnalyticProvider(sol);
        let config = QuasiConfig {
            recipe_mode: RecipeMode::ForceInterior,
            ..QuasiConfig::default()
        };
        let est = estimate_first_derivative_quasi(
            &p,
            &dom,
            &cond,
            &vx(&[0.2]),
            &vx(&[1.0]),
            &MarkovPolicy::Constant(0),
            200,
            &config,
            13,
            &provider,
        )
        .unwrap();
        assert_relative_eq!(est.mean, 3.0, epsilon = 1e-12);
        assert!(est.stderr <= 1e-12);
    }

    #[test]
    fn quadratic_terminal_second_derivative_exact() {
        // g quadratic, sigma constant, b = f = c = 0, trivial recipe: the
        // estimate equals the constant second derivative of g with zero
        // variance when the provider serves g's derivatives at the exit.
        let p = builtins::quadratic_terminal_1d();
        let dom = builtins::default_domain("ode1d");
        let cond = InteriorCondition::zero(1, 1);
        let sol = AnalyticSolution {
            value: Arc::new(|x: &VecF| x[0] * x[0]),
            grad: Arc::new(|x: &VecF| DVector::from_element(1, 2.0 * x[0])),
            hess: Arc::new(|_x| DMatrix::from_element(1, 1, 2.0)),
        };
        let provider = AnalyticProvider(sol);
        let config = QuasiConfig {
            recipe_mode: RecipeMode::ForceInterior,
            ..QuasiConfig::default()
        };
        let est = estimate_second_derivative_quasi(
            &p,
            &dom,
            &cond,
            &vx(&[0.1]),
            &vx(&[1.0]),
            &MarkovPolicy::Constant(0),
            200,
            &config,
            17,
            &provider,
        )
        .unwrap();
        assert_relative_eq!(est.mean, 2.0, epsilon = 1e-10);
        assert!(est.stderr <= 1e-10);
    }

    #[test]
    fn probe_eps_zero_rows_are_exact_zero() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let cond = InteriorCondition::zero(1, 1);
        let spec = SimSpec::new(ProcessSet::full());
        let report = convergence_probe(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            &vx(&[1.0]),
            &[0.0],
            16,
            &spec,
            77,
        );
        assert_eq!(report.rows[0].sup_first_err, 0.0);
        assert_eq!(report.rows[0].sup_second_err, 0.0);
    }

    #[test]
    fn boundary_provider_requires_boundary_points() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let provider = BoundaryDataProvider::new(&p, &dom, p.k0, 3);
        assert!(provider.value(&vx(&[1.0])).is_ok());
        assert!(matches!(
            provider.value(&vx(&[0.5])),
            Err(EstimatorError::MissingBoundaryGradient { .. })
        ));
        assert!(provider.gradient_band(&vx(&[1.0])) > 0.0);
    }
}
