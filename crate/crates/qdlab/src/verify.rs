//! Empirical verification of the barrier supermartingale properties,
//! quasiderivative moment bounds, and the interior derivative estimates.
//!
//! The barrier drift can only be checked statistically at desk scale, so the
//! supermartingale test compares checkpoint means at two standard errors
//! with a Bonferroni adjustment over checkpoint pairs. Moment and derivative
//! ratios are tested for boundary growth with a one-sided Mann-Kendall
//! trend test. Fitted constants are reported, never asserted against any
//! prescribed value.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::engine::{run_bundles, Caps, MarkovPolicy, PathBundle, ProcessSet, SimSpec, StopRegion};
use crate::estimators::ValueProvider;
use crate::geometry::{Domain, Levels};
use crate::nondegeneracy::mu;
use crate::problem::{ControlProblem, InteriorCondition};
use crate::recipe::{boundary_recipe, interior_recipe, RecipeMode, RecipeRegion};
use crate::VecF;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("point with psi={psi} is outside the barrier's region")]
    RegionMismatch { psi: f64 },
    #[error("underpowered: {n} paths, need at least {needed}")]
    Underpowered { n: usize, needed: usize },
}

/// Which barrier to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BarrierKind {
    /// Boundary-layer barrier
    /// `[lambda + sqrt(psi)(1 + sqrt(psi))] |xi|^2 + K1 phi^{3/2} psi_(xi)^2 / psi`.
    BoundaryLayer,
    /// Interior barrier `lambda^{3/4} |xi|^2`.
    Interior,
}

/// Closed-form barrier evaluation; errors when the point lies outside the
/// barrier's validity region.
pub fn barrier_eval(
    kind: BarrierKind,
    domain: &Domain,
    x: &VecF,
    xi: &VecF,
    lambda: f64,
    k1: f64,
) -> Result<f64, VerifyError> {
    let psi = domain.psi(x);
    match kind {
        BarrierKind::BoundaryLayer => {
            if psi <= 0.0 || psi >= lambda {
                return Err(VerifyError::RegionMismatch { psi });
            }
            let s = psi.sqrt();
            let phi = lambda * lambda + psi * (1.0 - psi / (4.0 * lambda));
            let psi_xi = domain.grad(x).dot(xi);
            Ok((lambda + s * (1.0 + s)) * xi.norm_squared()
                + k1 * phi.powf(1.5) * psi_xi * psi_xi / psi)
        }
        BarrierKind::Interior => {
            if psi <= lambda * lambda {
                return Err(VerifyError::RegionMismatch { psi });
            }
            Ok(lambda.powf(0.75) * xi.norm_squared())
        }
    }
}

/// Statistic tracked per checkpoint for the supermartingale test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BarrierStatistic {
    Boundary,
    SqrtBoundary,
    DiscountedInterior,
    SqrtDiscountedInterior,
}

impl BarrierStatistic {
    pub fn label(&self) -> &'static str {
        match self {
            BarrierStatistic::Boundary => "boundary barrier",
            BarrierStatistic::SqrtBoundary => "sqrt boundary barrier",
            BarrierStatistic::DiscountedInterior => "discounted interior barrier",
            BarrierStatistic::SqrtDiscountedInterior => "sqrt discounted interior barrier",
        }
    }
}

/// Per-path checkpoint values of a barrier statistic, built from bundle
/// snapshots (values freeze at the stop time).
pub fn collect_barrier_samples(
    bundles: &[PathBundle],
    stat: BarrierStatistic,
    domain: &Domain,
    lambda: f64,
    k1: f64,
) -> Vec<Vec<f64>> {
    bundles
        .iter()
        .map(|b| {
            b.snapshots
                .iter()
                .map(|s| {
                    let psi = domain.psi(&s.x);
                    match stat {
                        BarrierStatistic::Boundary | BarrierStatistic::SqrtBoundary => {
                            let sq = psi.sqrt().max(0.0);
                            let phi = lambda * lambda + psi * (1.0 - psi / (4.0 * lambda));
                            let psi_xi = domain.grad(&s.x).dot(&s.xi);
                            let b1 = (lambda + sq * (1.0 + sq)) * s.xi.norm_squared()
                                + if psi > 0.0 {
                                    k1 * phi.powf(1.5) * psi_xi * psi_xi / psi
                                } else {
                                    0.0
                                };
                            if stat == BarrierStatistic::Boundary {
                                b1
                            } else {
                                b1.sqrt()
                            }
                        }
                        BarrierStatistic::DiscountedInterior | BarrierStatistic::SqrtDiscountedInterior => {
                            let b2 = lambda.powf(0.75) * s.xi.norm_squared() * (-s.phi).exp();
                            if stat == BarrierStatistic::DiscountedInterior {
                                b2
                            } else {
                                b2.sqrt()
                            }
                        }
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SupermartingaleReport {
    pub pass: bool,
    /// Largest paired drift z-score over consecutive checkpoint pairs.
    pub max_z: f64,
    pub threshold: f64,
    pub pair_z: Vec<f64>,
    pub n_paths: usize,
}

/// Consecutive-checkpoint mean comparison at two standard errors with a
/// Bonferroni adjustment over the pairs; paired differences give the
/// z-scores. PASS means no pair shows significant positive drift.
pub fn supermartingale_test(
    values: &[Vec<f64>],
    checkpoints: &[f64],
) -> Result<SupermartingaleReport, VerifyError> {
    let n = values.len();
    if n < 1000 {
        return Err(VerifyError::Underpowered { n, needed: 1000 });
    }
    let m = checkpoints.len().saturating_sub(1);
    assert!(m >= 1, "need at least two checkpoints");
    let normal = Normal::new(0.0, 1.0).unwrap();
    // Per-pair level matching the 2-sigma design, Bonferroni over pairs.
    let p2 = 1.0 - normal.cdf(2.0);
    let threshold = normal.inverse_cdf(1.0 - p2 / m as f64);
    let mut pair_z = Vec::with_capacity(m);
    for k in 0..m {
        let diffs: Vec<f64> = values
            .iter()
            .map(|row| row[k + 1] - row[k])
            .collect();
        let (mean, se) = crate::engine::mean_stderr(&diffs);
        let z = if se > 0.0 {
            mean / se
        } else if mean > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        pair_z.push(z);
    }
    let max_z = pair_z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SupermartingaleReport {
        pass: max_z <= threshold,
        max_z,
        threshold,
        pair_z,
        n_paths: n,
    })
}

/// One-sided Mann-Kendall p-value for an increasing trend. Large p means no
/// evidence of growth.
pub fn mann_kendall_increasing_p(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 3 {
        return 1.0;
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = values[j] - values[i];
            if d > 0.0 {
                s += 1;
            } else if d < 0.0 {
                s -= 1;
            }
        }
    }
    let var = (n as f64) * (n as f64 - 1.0) * (2.0 * n as f64 + 5.0) / 18.0;
    let z = if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    1.0 - normal.cdf(z)
}

/// Moment-ratio table along a depth ladder: per start level, Monte Carlo
/// moment quantities divided by the barrier at the start state.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub names: Vec<String>,
    /// Start levels ordered from deep to shallow (approaching the boundary).
    pub psi_levels: Vec<f64>,
    /// Start direction shared by all levels.
    pub direction: Vec<f64>,
    /// `table[level][statistic]`.
    pub table: Vec<Vec<f64>>,
    /// Standard errors matching `table`.
    pub stderr: Vec<Vec<f64>>,
    /// Mann-Kendall p-value per statistic (increasing toward the boundary).
    pub trend_p: Vec<f64>,
    pub pass: bool,
}

fn trend_report(
    names: Vec<String>,
    psi_levels: Vec<f64>,
    direction: Vec<f64>,
    table: Vec<Vec<f64>>,
    stderr: Vec<Vec<f64>>,
) -> MomentReport {
    let n_stats = names.len();
    let mut trend_p = Vec::with_capacity(n_stats);
    for s in 0..n_stats {
        let series: Vec<f64> = table.iter().map(|row| row[s]).collect();
        trend_p.push(mann_kendall_increasing_p(&series));
    }
    let pass = trend_p.iter().all(|&p| p > 0.05);
    MomentReport {
        names,
        psi_levels,
        direction,
        table,
        stderr,
        trend_p,
        pass,
    }
}

/// Boundary-layer moment ratios (band-stopped bundles under the boundary
/// recipe): integral and sup moments of the quasiderivatives divided by the
/// boundary barrier at the start.
#[allow(clippy::too_many_arguments)]
pub fn moment_bound_check_boundary(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    xi0: &VecF,
    levels: Levels,
    k1: f64,
    psi_ladder: &[f64],
    n_paths: usize,
    caps: Caps,
    seed: u64,
    upsilon_floor: f64,
) -> MomentReport {
    let names = vec![
        "int |xi|^2 + psi_(xi)^2/psi^2".to_string(),
        "sup |xi|^2".to_string(),
        "sup |eta|".to_string(),
        "(int |eta|^2)^(1/2)".to_string(),
    ];
    let dir = principal_direction(domain);
    let mut table = Vec::new();
    let mut errs = Vec::new();
    let mut used_levels = Vec::new();
    for &level in psi_ladder {
        let Some(x0) = domain.point_at_psi(&dir, level) else {
            continue;
        };
        let spec = SimSpec::new(ProcessSet::second_order())
            .with_caps(caps)
            .with_levels(levels)
            .with_recipe_mode(RecipeMode::ForceBoundary)
            .with_stop_region(StopRegion::PsiBand {
                lo: levels.delta,
                hi: levels.lambda,
            })
            .with_upsilon_floor(upsilon_floor);
        let eta0 = VecF::zeros(problem.d);
        let bundles = run_bundles(
            problem,
            domain,
            cond,
            &x0,
            xi0,
            &eta0,
            &MarkovPolicy::Constant(0),
            &spec,
            seed,
            n_paths,
        );
        let barrier_at_start =
            barrier_eval(BarrierKind::BoundaryLayer, domain, &x0, xi0, levels.lambda, k1)
                .unwrap_or(f64::NAN);
        let ok: Vec<&PathBundle> = bundles.iter().filter(|b| !b.aborted()).collect();
        let stat = |f: &dyn Fn(&PathBundle) -> f64| {
            let vals: Vec<f64> = ok
                .iter()
                .map(|b| {
                    let lhs = f(b);
                    if barrier_at_start > 0.0 {
                        lhs / barrier_at_start
                    } else if lhs == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            crate::engine::mean_stderr(&vals)
        };
        let cols = [
            stat(&|b| b.stats.int_xi_barrier),
            stat(&|b| b.stats.sup_xi_sq),
            stat(&|b| b.stats.sup_eta_norm),
            stat(&|b| b.stats.int_eta_sq.sqrt()),
        ];
        table.push(cols.iter().map(|c| c.0).collect());
        errs.push(cols.iter().map(|c| c.1).collect());
        used_levels.push(level);
    }
    trend_report(
        names,
        used_levels,
        xi0.iter().cloned().collect(),
        table,
        errs,
    )
}

/// Interior moment ratios (sub-level-stopped bundles under the interior
/// recipe), including the strengthened variants with the half-time credit.
#[allow(clippy::too_many_arguments)]
pub fn moment_bound_check_interior(
    problem: &ControlProblem,
    domain: &Domain,
    cond: &InteriorCondition,
    xi0: &VecF,
    levels: Levels,
    psi_ladder: &[f64],
    n_paths: usize,
    caps: Caps,
    seed: u64,
) -> MomentReport {
    let names = vec![
        "int e^-phi |xi|^2".to_string(),
        "sup e^-phi |xi|^2".to_string(),
        "sup e^-phi |eta|".to_string(),
        "(int e^-2phi |eta|^2)^(1/2)".to_string(),
        "int e^(-phi+t/2) |xi|^2".to_string(),
        "sup e^(-phi+t/2) |xi|^2".to_string(),
        "sup e^(-phi+t/2) |eta|".to_string(),
        "(int e^(-2phi+t) |eta|^2)^(1/2)".to_string(),
    ];
    let dir = principal_direction(domain);
    let lam2 = levels.lambda * levels.lambda;
    let mut table = Vec::new();
    let mut errs = Vec::new();
    let mut used_levels = Vec::new();
    for &level in psi_ladder {
        if level <= lam2 {
            continue;
        }
        let Some(x0) = domain.point_at_psi(&dir, level) else {
            continue;
        };
        let spec = SimSpec::new(ProcessSet::second_order())
            .with_caps(caps)
            .with_levels(levels)
            .with_recipe_mode(RecipeMode::ForceInterior)
            .with_stop_region(StopRegion::PsiAbove { lo: lam2 });
        let eta0 = VecF::zeros(problem.d);
        let bundles = run_bundles(
            problem,
            domain,
            cond,
            &x0,
            xi0,
            &eta0,
            &MarkovPolicy::Constant(0),
            &spec,
            seed,
            n_paths,
        );
        let barrier_at_start =
            barrier_eval(BarrierKind::Interior, domain, &x0, xi0, levels.lambda, 1.0)
                .unwrap_or(f64::NAN);
        let ok: Vec<&PathBundle> = bundles.iter().filter(|b| !b.aborted()).collect();
        let stat = |f: &dyn Fn(&PathBundle) -> f64| {
            let vals: Vec<f64> = ok
                .iter()
                .map(|b| {
                    let lhs = f(b);
                    if barrier_at_start > 0.0 {
                        lhs / barrier_at_start
                    } else if lhs == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            crate::engine::mean_stderr(&vals)
        };
        let cols = [
            stat(&|b| b.stats.int_disc_xi_sq),
            stat(&|b| b.stats.sup_disc_xi_sq),
            stat(&|b| b.stats.sup_disc_eta),
            stat(&|b| b.stats.int_disc2_eta_sq.sqrt()),
            stat(&|b| b.stats.int_disc_half_xi_sq),
            stat(&|b| b.stats.sup_disc_half_xi_sq),
            stat(&|b| b.stats.sup_disc_half_eta),
            stat(&|b| b.stats.int_disc2_t_eta_sq.sqrt()),
        ];
        table.push(cols.iter().map(|c| c.0).collect());
        errs.push(cols.iter().map(|c| c.1).collect());
        used_levels.push(level);
    }
    trend_report(
        names,
        used_levels,
        xi0.iter().cloned().collect(),
        table,
        errs,
    )
}

fn principal_direction(domain: &Domain) -> VecF {
    let mut dir = VecF::zeros(domain.dim);
    dir[0] = 1.0;
    dir
}

/// Per-point interior derivative-bound ratios:
/// `|v_(xi)| / (|xi| + |psi_(xi)|/sqrt(psi))`,
/// `(-v_(xi)(xi))_+ / (|xi|^2 + psi_(xi)^2/psi)`, and where the
/// nondegeneracy functional exceeds the cutoff,
/// `v_(xi)(xi) psi mu(x, xi/|xi|) / |xi|^2`.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeBoundReport {
    pub psi_levels: Vec<f64>,
    pub first_ratio: Vec<f64>,
    pub lower_ratio: Vec<f64>,
    /// One entry per point where the nondegeneracy cutoff was met.
    pub upper_ratio: Vec<Option<f64>>,
    pub fitted_n_first: f64,
    pub fitted_n_lower: f64,
    pub fitted_n_upper: f64,
    pub trend_p_first: f64,
    pub trend_p_lower: f64,
    pub trend_p_upper: f64,
    pub pass: bool,
}

pub const MU_CUTOFF: f64 = 1e-6;

pub fn derivative_bound_check(
    problem: &ControlProblem,
    domain: &Domain,
    points: &[VecF],
    dirs: &[VecF],
    derivatives: &dyn Fn(&VecF, &VecF) -> Option<(f64, f64, f64)>,
) -> DerivativeBoundReport {
    assert_eq!(points.len(), dirs.len());
    let mut rows: Vec<(f64, f64, f64, Option<f64>)> = Vec::new();
    for (x, xi) in points.iter().zip(dirs.iter()) {
        let Some((_v, d1, d2)) = derivatives(x, xi) else {
            continue;
        };
        let psi = domain.psi(x);
        if psi <= 0.0 {
            continue;
        }
        let psi_xi = domain.grad(x).dot(xi);
        let first = d1.abs() / (xi.norm() + psi_xi.abs() / psi.sqrt());
        let lower = (-d2).max(0.0) / (xi.norm_squared() + psi_xi * psi_xi / psi);
        let unit = xi / xi.norm();
        let mu_val = mu(problem, x, &unit);
        let upper = if mu_val > MU_CUTOFF {
            Some(d2 * psi * mu_val / xi.norm_squared())
        } else {
            None
        };
        rows.push((psi, first, lower, upper));
    }
    // Deep-to-shallow order for the boundary-growth trend.
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let psi_levels: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let first_ratio: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let lower_ratio: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let upper_ratio: Vec<Option<f64>> = rows.iter().map(|r| r.3).collect();
    let upper_present: Vec<f64> = upper_ratio.iter().filter_map(|u| *u).collect();
    let fitted = |v: &[f64]| v.iter().cloned().fold(0.0f64, f64::max);
    // The bound is one-sided: only growth of the positive part matters.
    let upper_positive: Vec<f64> = upper_present.iter().map(|u| u.max(0.0)).collect();
    let trend_p_first = mann_kendall_increasing_p(&first_ratio);
    let trend_p_lower = mann_kendall_increasing_p(&lower_ratio);
    let trend_p_upper = mann_kendall_increasing_p(&upper_positive);
    let fitted_n_first = fitted(&first_ratio);
    let fitted_n_lower = fitted(&lower_ratio);
    let fitted_n_upper = fitted(&upper_present);
    let pass = fitted_n_first.is_finite()
        && fitted_n_lower.is_finite()
        && trend_p_first > 0.05
        && trend_p_lower > 0.05
        && (upper_present.is_empty() || trend_p_upper > 0.05);
    DerivativeBoundReport {
        psi_levels,
        first_ratio,
        lower_ratio,
        upper_ratio,
        fitted_n_first,
        fitted_n_lower,
        fitted_n_upper,
        trend_p_first,
        trend_p_lower,
        trend_p_upper,
        pass,
    }
}

/// Boundary normal-derivative check: `max |v_(n)|` over boundary samples
/// against `K (|g|_2 + sup |f|)` with the fitted `K` reported.
#[derive(Debug, Clone, Serialize)]
pub struct NormalDerivativeReport {
    pub max_normal_derivative: f64,
    pub payoff_scale: f64,
    pub fitted_k: f64,
    pub bounded: bool,
}

pub fn normal_derivative_check(
    problem: &ControlProblem,
    domain: &Domain,
    boundary_samples: &[VecF],
    provider: &dyn ValueProvider,
) -> NormalDerivativeReport {
    let mut max_vn = 0.0f64;
    for b in boundary_samples {
        let n = domain.inward_normal(b);
        if let Ok(grad) = provider.gradient(b) {
            max_vn = max_vn.max(grad.dot(&n).abs());
        }
    }
    // Payoff scale |g|_2 + sup_alpha |f|_0 by interior sampling.
    let pts = domain.sample_interior(512, 0x9d, None);
    let mut g2 = 0.0f64;
    let mut f_sup = 0.0f64;
    for x in &pts {
        g2 = g2.max(
            problem.terminal(x).abs()
                + problem.terminal_grad(x).norm()
                + problem.terminal_hess(x).amax(),
        );
        for alpha in 0..problem.n_controls() {
            f_sup = f_sup.max(problem.running(alpha, x).abs());
        }
    }
    let payoff_scale = g2 + f_sup;
    let fitted_k = if payoff_scale > 0.0 {
        max_vn / payoff_scale
    } else {
        0.0
    };
    NormalDerivativeReport {
        max_normal_derivative: max_vn,
        payoff_scale,
        fitted_k,
        bounded: max_vn.is_finite(),
    }
}

/// Deterministic barrier drift diagnostic: applies the joint generator of
/// `(x, xi)` under the boundary recipe to the boundary barrier by finite
/// differences. A nonpositive value everywhere in the band certifies the
/// supermartingale drift at the chosen `(lambda, K1)`.
pub fn boundary_barrier_drift(
    problem: &ControlProblem,
    domain: &Domain,
    alpha: usize,
    x: &VecF,
    xi: &VecF,
    levels: Levels,
    k1: f64,
) -> Option<f64> {
    let d = problem.d;
    let rec = boundary_recipe(problem, domain, alpha, x, xi, levels.lambda, 1e-12).ok()?;
    let sigma = problem.sigma(alpha, x);
    let b = problem.drift(alpha, x);
    let sigma_dxi = problem.sigma_dir(alpha, x, xi);
    let diff_xi = &sigma_dxi + &sigma * rec.r + &sigma * &rec.p;
    let drift_xi = problem.drift_dir(alpha, x, xi) + &b * (2.0 * rec.r) - &sigma * &rec.pi;

    // Joint diffusion J (2d x d1) and drift m (2d).
    let d1 = problem.d1;
    let mut joint_sigma = crate::MatF::zeros(2 * d, d1);
    for i in 0..d {
        for k in 0..d1 {
            joint_sigma[(i, k)] = sigma[(i, k)];
            joint_sigma[(d + i, k)] = diff_xi[(i, k)];
        }
    }
    let mut joint_drift = VecF::zeros(2 * d);
    for i in 0..d {
        joint_drift[i] = b[i];
        joint_drift[d + i] = drift_xi[i];
    }
    let cov = &joint_sigma * joint_sigma.transpose();

    let f = |z: &VecF| -> Option<f64> {
        let xx = VecF::from_iterator(d, z.iter().take(d).cloned());
        let xxi = VecF::from_iterator(d, z.iter().skip(d).cloned());
        barrier_eval(
            BarrierKind::BoundaryLayer,
            domain,
            &xx,
            &xxi,
            levels.lambda,
            k1,
        )
        .ok()
    };
    let mut z0 = VecF::zeros(2 * d);
    for i in 0..d {
        z0[i] = x[i];
        z0[d + i] = xi[i];
    }
    let h = 1e-5;
    let f0 = f(&z0)?;
    // Gradient and Hessian by central differences.
    let mut grad = VecF::zeros(2 * d);
    let mut hess = crate::MatF::zeros(2 * d, 2 * d);
    for i in 0..2 * d {
        let mut zp = z0.clone();
        zp[i] += h;
        let mut zm = z0.clone();
        zm[i] -= h;
        let (fp, fm) = (f(&zp)?, f(&zm)?);
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..2 * d {
        for j in (i + 1)..2 * d {
            let mut zpp = z0.clone();
            zpp[i] += h;
            zpp[j] += h;
            let mut zpm = z0.clone();
            zpm[i] += h;
            zpm[j] -= h;
            let mut zmp = z0.clone();
            zmp[i] -= h;
            zmp[j] += h;
            let mut zmm = z0.clone();
            zmm[i] -= h;
            zmm[j] -= h;
            let v = (f(&zpp)? - f(&zpm)? - f(&zmp)? + f(&zmm)?) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let mut drift = 0.5 * (cov * &hess).trace();
    drift += grad.dot(&joint_drift);
    Some(drift)
}

/// Same diagnostic for the discounted interior barrier: the generator
/// gains a `-c B` killing term.
pub fn interior_barrier_drift(
    problem: &ControlProblem,
    cond: &InteriorCondition,
    alpha: usize,
    x: &VecF,
    xi: &VecF,
    levels: Levels,
) -> f64 {
    let d = problem.d;
    let eta = VecF::zeros(d);
    let rec = interior_recipe(problem, cond, alpha, x, xi, &eta);
    debug_assert_eq!(rec.region, RecipeRegion::Interior);
    let sigma = problem.sigma(alpha, x);
    let b = problem.drift(alpha, x);
    let sigma_dxi = problem.sigma_dir(alpha, x, xi);
    let diff_xi = &sigma_dxi + &sigma * rec.r + &sigma * &rec.p;
    let drift_xi = problem.drift_dir(alpha, x, xi) + &b * (2.0 * rec.r) - &sigma * &rec.pi;
    // The interior barrier lambda^{3/4} |xi|^2 has closed-form derivatives.
    let lam34 = levels.lambda.powf(0.75);
    let c = problem.discount(alpha, x);
    // Generator applied to e^{-phi} B at phi = 0:
    // tr(D D^T) lam34 + 2 lam34 (xi, drift) - c B.
    let quad = (&diff_xi * diff_xi.transpose()).trace();
    lam34 * quad + 2.0 * lam34 * xi.dot(&drift_xi) - c * lam34 * xi.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vx(v: &[f64]) -> VecF {
        VecF::from_column_slice(v)
    }

    #[test]
    fn interior_barrier_arithmetic() {
        // lambda = 0.16, |xi| = 2: 0.16^0.75 * 4 = 1.0119 (4 d.p.)
        let dom = builtins::default_domain("ode1d");
        let x = vx(&[0.2]); // psi = 0.96 > lambda^2
        let b = barrier_eval(BarrierKind::Interior, &dom, &x, &vx(&[2.0]), 0.16, 1.0).unwrap();
        assert_relative_eq!(b, 1.0119, epsilon = 5e-5);
    }

    #[test]
    fn boundary_barrier_arithmetic() {
        // psi = 0.04, lambda = 0.25, |xi| = 1, psi_(xi) = 0:
        // [0.25 + 0.2 * 1.2] = 0.49.
        let dom = builtins::default_domain("ball2d");
        // On the unit disk psi = 1 - |x|^2: psi = 0.04 at |x| = sqrt(0.96);
        // a tangential direction has psi_(xi) = 0.
        let r = 0.96f64.sqrt();
        let x = vx(&[r, 0.0]);
        let tangent = vx(&[0.0, 1.0]);
        let b =
            barrier_eval(BarrierKind::BoundaryLayer, &dom, &x, &tangent, 0.25, 5120.0).unwrap();
        assert_relative_eq!(b, 0.49, epsilon = 1e-12);
    }

    #[test]
    fn boundary_barrier_quadratic_in_direction() {
        let dom = builtins::default_domain("ode1d");
        let x = vx(&[0.9]);
        let xi = vx(&[0.7]);
        let b1 = barrier_eval(BarrierKind::BoundaryLayer, &dom, &x, &xi, 0.25, 10.0).unwrap();
        let b2 =
            barrier_eval(BarrierKind::BoundaryLayer, &dom, &x, &(&xi * 2.0), 0.25, 10.0).unwrap();
        assert_relative_eq!(b2, 4.0 * b1, epsilon = 1e-12);
        // Even in the direction.
        let bm =
            barrier_eval(BarrierKind::BoundaryLayer, &dom, &x, &(&xi * -1.0), 0.25, 10.0).unwrap();
        assert_relative_eq!(bm, b1, epsilon = 1e-14);
    }

    #[test]
    fn region_mismatch_detected() {
        let dom = builtins::default_domain("ode1d");
        // Interior point for the boundary barrier.
        assert!(matches!(
            barrier_eval(BarrierKind::BoundaryLayer, &dom, &vx(&[0.0]), &vx(&[1.0]), 0.25, 1.0),
            Err(VerifyError::RegionMismatch { .. })
        ));
        // Shallow point for the interior barrier.
        assert!(matches!(
            barrier_eval(BarrierKind::Interior, &dom, &vx(&[0.995]), &vx(&[1.0]), 0.25, 1.0),
            Err(VerifyError::RegionMismatch { .. })
        ));
    }

    #[test]
    fn supermartingale_verdicts_on_synthetic_processes() {
        // Deterministic decreasing process: PASS.
        let decreasing: Vec<Vec<f64>> = (0..1500)
            .map(|k| (0..5).map(|t| 10.0 - t as f64 - 0.001 * k as f64).collect())
            .collect();
        let cp = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let rep = supermartingale_test(&decreasing, &cp).unwrap();
        assert!(rep.pass);

        // Random-walk square is a submartingale: FAIL with positive drift.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let walks: Vec<Vec<f64>> = (0..3000)
            .map(|_| {
                let mut s = 0.0f64;
                let mut out = Vec::with_capacity(5);
                out.push(s * s);
                for _ in 0..4 {
                    for _ in 0..16 {
                        s += if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    }
                    out.push(s * s);
                }
                out
            })
            .collect();
        let rep = supermartingale_test(&walks, &cp).unwrap();
        assert!(!rep.pass);
        assert!(rep.max_z > 2.0);
    }

    #[test]
    fn verdict_stable_under_path_subsampling() {
        // Halving the path set leaves the verdict unchanged within the
        // two-sigma design (both on a clear supermartingale and on a clear
        // submartingale).
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cp = vec![0.0, 1.0, 2.0, 3.0];
        let make = |drift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..4000)
                .map(|_| {
                    let mut v = 10.0f64;
                    let mut out = vec![v];
                    for _ in 0..3 {
                        v += drift + 0.05 * (rng.gen::<f64>() - 0.5);
                        out.push(v);
                    }
                    out
                })
                .collect()
        };
        for drift in [-0.5f64, 0.5] {
            let values = make(drift, &mut rng);
            let full = supermartingale_test(&values, &cp).unwrap();
            let half: Vec<Vec<f64>> = values.iter().step_by(2).cloned().collect();
            let sub = supermartingale_test(&half, &cp).unwrap();
            assert_eq!(full.pass, sub.pass, "drift {drift}");
        }
    }

    #[test]
    fn underpowered_rejected() {
        let few = vec![vec![1.0, 0.5]; 10];
        assert!(matches!(
            supermartingale_test(&few, &[0.0, 1.0]),
            Err(VerifyError::Underpowered { .. })
        ));
    }

    #[test]
    fn mann_kendall_detects_trends() {
        let increasing: Vec<f64> = (0..12).map(|k| k as f64).collect();
        assert!(mann_kendall_increasing_p(&increasing) < 0.01);
        let decreasing: Vec<f64> = (0..12).map(|k| -(k as f64)).collect();
        assert!(mann_kendall_increasing_p(&decreasing) > 0.5);
        let flat_noise = [0.5, 0.48, 0.52, 0.51, 0.47, 0.53, 0.5, 0.49, 0.52, 0.48];
        assert!(mann_kendall_increasing_p(&flat_noise) > 0.05);
    }

    #[test]
    fn boundary_drift_nonpositive_on_benchmark_band() {
        // Deterministic generator check of the boundary barrier drift for
        // the 1D benchmark at lambda = 0.25, K1 = 10 K0^3.
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let levels = Levels::default();
        let k1 = 10.0 * p.k0.powi(3);
        for &psi in &[0.002, 0.01, 0.05, 0.1, 0.2] {
            let x = dom.point_at_psi(&vx(&[1.0]), psi).unwrap();
            for &xiv in &[1e-3, 0.1, 1.0, 5.0] {
                let drift =
                    boundary_barrier_drift(&p, &dom, 0, &x, &vx(&[xiv]), levels, k1).unwrap();
                // Finite-difference slack scales with the barrier size.
                let scale = barrier_eval(BarrierKind::BoundaryLayer, &dom, &x, &vx(&[xiv]), 0.25, k1)
                    .unwrap()
                    .max(1.0);
                assert!(
                    drift <= 1e-4 * scale,
                    "positive drift {drift} at psi={psi}, xi={xiv}"
                );
            }
        }
    }

    #[test]
    fn interior_drift_nonpositive_with_unit_discount() {
        let p = builtins::ode1d().normalize_discount();
        let cond = InteriorCondition::zero(1, 1);
        let levels = Levels::default();
        for &xv in &[0.0, 0.3, 0.6] {
            let drift = interior_barrier_drift(&p, &cond, 0, &vx(&[xv]), &vx(&[1.0]), levels);
            assert!(drift <= 1e-12, "drift {drift}");
        }
    }

    #[test]
    fn derivative_bounds_on_closed_form_benchmark() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let sol = builtins::ode1d_solution();
        let mut points = Vec::new();
        let mut dirs = Vec::new();
        for k in 0..10 {
            // Geometric depth ladder from psi = 0.9 down to 0.02.
            let psi: f64 = 0.9 * (0.02f64 / 0.9).powf(k as f64 / 9.0);
            let x = (1.0 - psi).sqrt();
            points.push(vx(&[x]));
            dirs.push(vx(&[1.0]));
        }
        let report = derivative_bound_check(&p, &dom, &points, &dirs, &|x, xi| {
            let v = sol.value_at(x);
            let d1 = sol.grad_at(x).dot(xi);
            let d2 = (sol.hess_at(x) * xi).dot(xi);
            Some((v, d1, d2))
        });
        assert!(report.pass, "{report:?}");
        assert!(report.fitted_n_first.is_finite());
        // v'' = -1 < 0 everywhere: upper ratios are negative, bounded.
        for u in report.upper_ratio.iter().flatten() {
            assert!(*u <= 0.0);
        }
    }

    #[test]
    fn constant_value_gives_zero_ratios() {
        let p = builtins::quadratic_terminal_1d();
        let dom = builtins::default_domain("ode1d");
        let points: Vec<VecF> = (1..8).map(|k| vx(&[0.1 * k as f64])).collect();
        let dirs: Vec<VecF> = points.iter().map(|_| vx(&[1.0])).collect();
        let report = derivative_bound_check(&p, &dom, &points, &dirs, &|_x, _xi| {
            Some((1.0, 0.0, 0.0))
        });
        assert!(report.fitted_n_first == 0.0);
        assert!(report.fitted_n_lower == 0.0);
        assert!(report.pass);
    }

    #[test]
    fn zero_direction_gives_zero_ratios() {
        // With a zero start direction and constant noise the
        // quasiderivative stays at zero, and the 0/0 ratios resolve to 0.
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let cond = InteriorCondition::zero(1, 1);
        let levels = Levels::new(1e-3, 0.25).unwrap();
        let rep = moment_bound_check_boundary(
            &p,
            &dom,
            &cond,
            &vx(&[0.0]),
            levels,
            10.0 * p.k0.powi(3),
            &[0.1, 0.05],
            50,
            crate::engine::Caps::default(),
            3,
            1e-4,
        );
        for row in &rep.table {
            for v in row {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn ratios_invariant_under_direction_doubling() {
        // The quasiderivative flow is linear in the start direction and the
        // barrier is quadratic, so doubling the direction reproduces every
        // ratio (same driving noise).
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let cond = InteriorCondition::zero(1, 1);
        let levels = Levels::new(1e-3, 0.25).unwrap();
        let caps = crate::engine::Caps {
            xi_cap: 1e9,
            dt_boundary_factor: 0.01,
            ..crate::engine::Caps::default()
        };
        let run = |scale: f64| {
            moment_bound_check_boundary(
                &p,
                &dom,
                &cond,
                &vx(&[scale]),
                levels,
                10.0 * p.k0.powi(3),
                &[0.1, 0.03],
                50,
                caps,
                5,
                1e-4,
            )
        };
        let a = run(1.0);
        let b = run(2.0);
        for (ra, rb) in a.table.iter().zip(b.table.iter()) {
            for (va, vb) in ra.iter().zip(rb.iter()) {
                assert!(
                    (va - vb).abs() <= 1e-10 * va.abs().max(1e-300),
                    "{va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn normal_derivative_bounded_on_benchmark() {
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let provider = crate::estimators::AnalyticProvider(builtins::ode1d_solution());
        let samples = vec![vx(&[1.0]), vx(&[-1.0])];
        let report = normal_derivative_check(&p, &dom, &samples, &provider);
        // |v'(+-1)| = 1 and sup |f| = 1, g = 0: fitted K = 1.
        assert_relative_eq!(report.max_normal_derivative, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.fitted_k, 1.0, epsilon = 1e-12);
        assert!(report.bounded);
    }

    #[test]
    fn normal_derivative_fitted_k_invariant_under_payoff_scaling() {
        // f = 2 doubles the value and its normal derivative; the fitted K
        // is unchanged for the single-control linear problem.
        let p = builtins::ode1d();
        let dom = builtins::default_domain("ode1d");
        let sol2 = crate::builtins::AnalyticSolution {
            value: std::sync::Arc::new(|x: &VecF| 2.0 * (1.0 - x[0] * x[0]) / 2.0),
            grad: std::sync::Arc::new(|x: &VecF| {
                nalgebra::DVector::from_element(1, -2.0 * x[0])
            }),
            hess: std::sync::Arc::new(|_x| nalgebra::DMatrix::from_element(1, 1, -2.0)),
        };
        let base = normal_derivative_check(
            &p,
            &dom,
            &[vx(&[1.0]), vx(&[-1.0])],
            &crate::estimators::AnalyticProvider(builtins::ode1d_solution()),
        );
        let doubled_problem = builtins::scaled_running_1d(2.0);
        let doubled = normal_derivative_check(
            &doubled_problem,
            &dom,
            &[vx(&[1.0]), vx(&[-1.0])],
            &crate::estimators::AnalyticProvider(sol2),
        );
        assert_relative_eq!(base.fitted_k, doubled.fitted_k, epsilon = 1e-12);
    }
}
