//! Named benchmark problems, domains and experiment presets.
//!
//! Each benchmark fixes the controlled diffusion data and, where a closed
//! form exists, the exact value function used as an estimator oracle.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::geometry::Domain;
use crate::problem::{ClosureCoefficients, ControlProblem};
use crate::{MatF, VecF};

/// Closed-form value function with derivatives, attached to benchmarks that
/// admit one.
#[derive(Clone)]
pub struct AnalyticSolution {
    pub value: Arc<dyn Fn(&VecF) -> f64 + Send + Sync>,
    pub grad: Arc<dyn Fn(&VecF) -> VecF + Send + Sync>,
    pub hess: Arc<dyn Fn(&VecF) -> MatF + Send + Sync>,
}

impl AnalyticSolution {
    pub fn value_at(&self, x: &VecF) -> f64 {
        (self.value)(x)
    }
    pub fn grad_at(&self, x: &VecF) -> VecF {
        (self.grad)(x)
    }
    pub fn hess_at(&self, x: &VecF) -> MatF {
        (self.hess)(x)
    }
}

fn zeros_mat(d: usize, d1: usize) -> Box<dyn Fn(usize, &VecF, &VecF) -> MatF + Send + Sync> {
    Box::new(move |_a, _x, _dir| DMatrix::zeros(d, d1))
}

fn zeros_vec(d: usize) -> Box<dyn Fn(usize, &VecF, &VecF) -> VecF + Send + Sync> {
    Box::new(move |_a, _x, _dir| DVector::zeros(d))
}

fn zero_scalar() -> Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync> {
    Box::new(|_a, _x, _dir| 0.0)
}

/// Constant-coefficient template: per-control constant sigma, zero drift,
/// constant discount, spatially varying running payoff and terminal payoff.
#[allow(clippy::too_many_arguments)]
fn const_sigma_problem(
    name: &str,
    controls: Vec<String>,
    d: usize,
    d1: usize,
    k0: f64,
    sigmas: Vec<MatF>,
    c: f64,
    f: Box<dyn Fn(usize, &VecF) -> f64 + Send + Sync>,
    f_dir: Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync>,
    f_dir2: Box<dyn Fn(usize, &VecF, &VecF) -> f64 + Send + Sync>,
    g: Box<dyn Fn(&VecF) -> f64 + Send + Sync>,
    g_grad: Box<dyn Fn(&VecF) -> VecF + Send + Sync>,
    g_hess: Box<dyn Fn(&VecF) -> MatF + Send + Sync>,
) -> ControlProblem {
    let coef = ClosureCoefficients {
        sigma: Box::new(move |a, _x| sigmas[a].clone()),
        sigma_dir: zeros_mat(d, d1),
        sigma_dir2: zeros_mat(d, d1),
        drift: Box::new(move |_a, _x| DVector::zeros(d)),
        drift_dir: zeros_vec(d),
        drift_dir2: zeros_vec(d),
        discount: Box::new(move |_a, _x| c),
        discount_dir: zero_scalar(),
        discount_dir2: zero_scalar(),
        running: f,
        running_dir: f_dir,
        running_dir2: f_dir2,
        terminal: g,
        terminal_grad: g_grad,
        terminal_hess: g_hess,
    };
    ControlProblem::new(name, controls, d, d1, k0, Arc::new(coef))
}

/// 1D benchmark: `sigma = sqrt(2), b = c = 0, f = 1, g = 0` on `(-1, 1)`.
/// Exact value `(1 - x^2)/2`.
pub fn ode1d() -> ControlProblem {
    const_sigma_problem(
        "ode1d",
        vec!["0".into()],
        1,
        1,
        8.0,
        vec![DMatrix::from_element(1, 1, 2.0f64.sqrt())],
        0.0,
        Box::new(|_a, _x| 1.0),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(1)),
        Box::new(|_x| DMatrix::zeros(1, 1)),
    )
}

pub fn ode1d_solution() -> AnalyticSolution {
    AnalyticSolution {
        value: Arc::new(|x: &VecF| (1.0 - x[0] * x[0]) / 2.0),
        grad: Arc::new(|x: &VecF| DVector::from_element(1, -x[0])),
        hess: Arc::new(|_x: &VecF| DMatrix::from_element(1, 1, -1.0)),
    }
}

/// 1D benchmark with a non-polynomial solution: `sigma = sqrt(2), c = 1`,
/// running payoff chosen so the value is `cos(pi x / 2)`.
pub fn ode1d_smooth() -> ControlProblem {
    const_sigma_problem(
        "ode1d-smooth",
        vec!["0".into()],
        1,
        1,
        25.0,
        vec![DMatrix::from_element(1, 1, 2.0f64.sqrt())],
        1.0,
        Box::new(|_a, x: &VecF| (1.0 + PI * PI / 4.0) * (PI * x[0] / 2.0).cos()),
        Box::new(|_a, x: &VecF, dir: &VecF| {
            -(1.0 + PI * PI / 4.0) * (PI / 2.0) * (PI * x[0] / 2.0).sin() * dir[0]
        }),
        Box::new(|_a, x: &VecF, dir: &VecF| {
            -(1.0 + PI * PI / 4.0) * (PI * PI / 4.0) * (PI * x[0] / 2.0).cos() * dir[0] * dir[0]
        }),
        Box::new(|x: &VecF| (PI * x[0] / 2.0).cos()),
        Box::new(|x: &VecF| DVector::from_element(1, -(PI / 2.0) * (PI * x[0] / 2.0).sin())),
        Box::new(|x: &VecF| DMatrix::from_element(1, 1, -(PI * PI / 4.0) * (PI * x[0] / 2.0).cos())),
    )
}

pub fn ode1d_smooth_solution() -> AnalyticSolution {
    AnalyticSolution {
        value: Arc::new(|x: &VecF| (PI * x[0] / 2.0).cos()),
        grad: Arc::new(|x: &VecF| {
            DVector::from_element(1, -(PI / 2.0) * (PI * x[0] / 2.0).sin())
        }),
        hess: Arc::new(|x: &VecF| {
            DMatrix::from_element(1, 1, -(PI * PI / 4.0) * (PI * x[0] / 2.0).cos())
        }),
    }
}

/// Two-control 1D benchmark: `a^alpha = alpha in {1, 2}`, `b = c = 0`,
/// constant running payoff `f_const`, `g = 0`.
///
/// For `f_const = -1` the optimal control is the larger diffusion and the
/// value is `(x^2 - 1)/4`; for `f_const = +1` the smaller diffusion wins and
/// the value is `(1 - x^2)/2`.
pub fn twocontrol1d(f_const: f64) -> ControlProblem {
    const_sigma_problem(
        "twocontrol1d",
        vec!["1".into(), "2".into()],
        1,
        1,
        8.0,
        vec![
            DMatrix::from_element(1, 1, 2.0f64.sqrt()),
            DMatrix::from_element(1, 1, 2.0),
        ],
        0.0,
        Box::new(move |_a, _x| f_const),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(1)),
        Box::new(|_x| DMatrix::zeros(1, 1)),
    )
}

/// Same data as [`twocontrol1d`] with the control list reversed, for
/// relabeling-invariance tests.
pub fn twocontrol1d_swapped(f_const: f64) -> ControlProblem {
    const_sigma_problem(
        "twocontrol1d-swapped",
        vec!["2".into(), "1".into()],
        1,
        1,
        8.0,
        vec![
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 2.0f64.sqrt()),
        ],
        0.0,
        Box::new(move |_a, _x| f_const),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(1)),
        Box::new(|_x| DMatrix::zeros(1, 1)),
    )
}

pub fn twocontrol1d_solution(f_const: f64) -> AnalyticSolution {
    if f_const < 0.0 {
        AnalyticSolution {
            value: Arc::new(|x: &VecF| (x[0] * x[0] - 1.0) / 4.0),
            grad: Arc::new(|x: &VecF| DVector::from_element(1, x[0] / 2.0)),
            hess: Arc::new(|_x: &VecF| DMatrix::from_element(1, 1, 0.5)),
        }
    } else {
        AnalyticSolution {
            value: Arc::new(|x: &VecF| (1.0 - x[0] * x[0]) / 2.0),
            grad: Arc::new(|x: &VecF| DVector::from_element(1, -x[0])),
            hess: Arc::new(|_x: &VecF| DMatrix::from_element(1, 1, -1.0)),
        }
    }
}

/// Isotropic 2D benchmark on the unit disk: `sigma = sqrt(2) I`, `f = 1`.
/// Exact value `(1 - |x|^2)/4`.
pub fn ball2d() -> ControlProblem {
    const_sigma_problem(
        "ball2d",
        vec!["0".into()],
        2,
        2,
        8.0,
        vec![DMatrix::identity(2, 2) * 2.0f64.sqrt()],
        0.0,
        Box::new(|_a, _x| 1.0),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(2)),
        Box::new(|_x| DMatrix::zeros(2, 2)),
    )
}

pub fn ball2d_solution() -> AnalyticSolution {
    AnalyticSolution {
        value: Arc::new(|x: &VecF| (1.0 - x.norm_squared()) / 4.0),
        grad: Arc::new(|x: &VecF| x * -0.5),
        hess: Arc::new(|_x: &VecF| DMatrix::identity(2, 2) * -0.5),
    }
}

fn bending_terminal() -> (
    Box<dyn Fn(&VecF) -> f64 + Send + Sync>,
    Box<dyn Fn(&VecF) -> VecF + Send + Sync>,
    Box<dyn Fn(&VecF) -> MatF + Send + Sync>,
) {
    // g(x) = (x1 - x2)^2: bends in the (1, -1) direction, flat along (1, 1).
    (
        Box::new(|x: &VecF| (x[0] - x[1]).powi(2)),
        Box::new(|x: &VecF| {
            let u = 2.0 * (x[0] - x[1]);
            DVector::from_column_slice(&[u, -u])
        }),
        Box::new(|_x: &VecF| {
            DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0])
        }),
    )
}

/// Single-control 2D problem whose diffusion matrix comes from the operator
/// `u_{x1 x1} + 2 u_{x1 x2} + u_{x2 x2}`: degenerate in every direction
/// except along `(1, 1)`. Exact value `(x1 - x2)^2` for the bending terminal
/// payoff, since the noise moves the state only along `(1, 1)`.
pub fn paper_example_exa() -> ControlProblem {
    let (g, gg, gh) = bending_terminal();
    const_sigma_problem(
        "paper-example-exa",
        vec!["0".into()],
        2,
        1,
        8.0,
        vec![DMatrix::from_column_slice(2, 1, &[2.0f64.sqrt(), 2.0f64.sqrt()])],
        0.0,
        Box::new(|_a, _x| 0.0),
        zero_scalar(),
        zero_scalar(),
        g,
        gg,
        gh,
    )
}

pub fn paper_example_exa_solution() -> AnalyticSolution {
    AnalyticSolution {
        value: Arc::new(|x: &VecF| (x[0] - x[1]).powi(2)),
        grad: Arc::new(|x: &VecF| {
            let u = 2.0 * (x[0] - x[1]);
            DVector::from_column_slice(&[u, -u])
        }),
        hess: Arc::new(|_x: &VecF| DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0])),
    }
}

/// Rank-one degenerate 2D problem with a spatially rotating noise direction
/// `(1, 1 + gamma x1)`. Exercises the cross-derivative-dominant stencil
/// fallback in the grid solver and the direction-dependent nondegeneracy
/// functional.
pub fn degenerate2d() -> ControlProblem {
    let gamma = 0.25f64;
    let s2 = 2.0f64.sqrt();
    let (g, gg, gh) = bending_terminal();
    let coef = ClosureCoefficients {
        sigma: Box::new(move |_a, x: &VecF| {
            DMatrix::from_column_slice(2, 1, &[s2, s2 * (1.0 + gamma * x[0])])
        }),
        sigma_dir: Box::new(move |_a, _x: &VecF, dir: &VecF| {
            DMatrix::from_column_slice(2, 1, &[0.0, s2 * gamma * dir[0]])
        }),
        sigma_dir2: zeros_mat(2, 1),
        drift: Box::new(|_a, _x| DVector::zeros(2)),
        drift_dir: zeros_vec(2),
        drift_dir2: zeros_vec(2),
        discount: Box::new(|_a, _x| 0.0),
        discount_dir: zero_scalar(),
        discount_dir2: zero_scalar(),
        running: Box::new(|_a, _x| 0.0),
        running_dir: zero_scalar(),
        running_dir2: zero_scalar(),
        terminal: g,
        terminal_grad: gg,
        terminal_hess: gh,
    };
    ControlProblem::new(
        "degenerate2d",
        vec!["0".into()],
        2,
        1,
        8.0,
        Arc::new(coef),
    )
}

/// Direction of the noise column of [`degenerate2d`] at `x`, along which its
/// nondegeneracy functional is positive.
pub fn degenerate2d_present_direction(x: &VecF) -> VecF {
    DVector::from_column_slice(&[1.0, 1.0 + 0.25 * x[0]])
}

/// `sigma = s * sqrt(2)` on `(-1, 1)` with `f = 1`: normal nondegeneracy
/// level `s^2`.
pub fn scaled_isotropic_1d(s: f64) -> ControlProblem {
    const_sigma_problem(
        "scaled-isotropic-1d",
        vec!["0".into()],
        1,
        1,
        8.0,
        vec![DMatrix::from_element(1, 1, s * 2.0f64.sqrt())],
        0.0,
        Box::new(|_a, _x| 1.0),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(1)),
        Box::new(|_x| DMatrix::zeros(1, 1)),
    )
}

/// `sigma = diag(sqrt(2), 0)` on the unit disk: degenerate along the second
/// axis, used to witness normal-nondegeneracy failure.
pub fn axis_degenerate_2d() -> ControlProblem {
    const_sigma_problem(
        "axis-degenerate-2d",
        vec!["0".into()],
        2,
        2,
        8.0,
        vec![DMatrix::from_row_slice(2, 2, &[2.0f64.sqrt(), 0.0, 0.0, 0.0])],
        0.0,
        Box::new(|_a, _x| 1.0),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(2)),
        Box::new(|_x| DMatrix::zeros(2, 2)),
    )
}

/// `sigma(x) = x` away from the origin (domain centered at 3), for the
/// interior-condition cancellation identity.
pub fn linear_sigma_1d() -> ControlProblem {
    let coef = ClosureCoefficients {
        sigma: Box::new(|_a, x: &VecF| DMatrix::from_element(1, 1, x[0])),
        sigma_dir: Box::new(|_a, _x, dir: &VecF| DMatrix::from_element(1, 1, dir[0])),
        sigma_dir2: zeros_mat(1, 1),
        drift: Box::new(|_a, _x| DVector::zeros(1)),
        drift_dir: zeros_vec(1),
        drift_dir2: zeros_vec(1),
        discount: Box::new(|_a, _x| 0.0),
        discount_dir: zero_scalar(),
        discount_dir2: zero_scalar(),
        running: Box::new(|_a, _x| 0.0),
        running_dir: zero_scalar(),
        running_dir2: zero_scalar(),
        terminal: Box::new(|_x| 0.0),
        terminal_grad: Box::new(|_x| DVector::zeros(1)),
        terminal_hess: Box::new(|_x| DMatrix::zeros(1, 1)),
    };
    ControlProblem::new("linear-sigma-1d", vec!["0".into()], 1, 1, 8.0, Arc::new(coef))
}

/// `sigma(x) = 1 + sin(L x)/2` with unit discount: for large `L` the
/// Lipschitz content beats the discount and the interior condition fails
/// with the trivial witness.
pub fn steep_sigma_1d(l: f64) -> ControlProblem {
    let coef = ClosureCoefficients {
        sigma: Box::new(move |_a, x: &VecF| DMatrix::from_element(1, 1, 1.0 + 0.5 * (l * x[0]).sin())),
        sigma_dir: Box::new(move |_a, x: &VecF, dir: &VecF| {
            DMatrix::from_element(1, 1, 0.5 * l * (l * x[0]).cos() * dir[0])
        }),
        sigma_dir2: Box::new(move |_a, x: &VecF, dir: &VecF| {
            DMatrix::from_element(1, 1, -0.5 * l * l * (l * x[0]).sin() * dir[0] * dir[0])
        }),
        drift: Box::new(|_a, _x| DVector::zeros(1)),
        drift_dir: zeros_vec(1),
        drift_dir2: zeros_vec(1),
        discount: Box::new(|_a, _x| 1.0),
        discount_dir: zero_scalar(),
        discount_dir2: zero_scalar(),
        running: Box::new(|_a, _x| 0.0),
        running_dir: zero_scalar(),
        running_dir2: zero_scalar(),
        terminal: Box::new(|_x| 0.0),
        terminal_grad: Box::new(|_x| DVector::zeros(1)),
        terminal_hess: Box::new(|_x| DMatrix::zeros(1, 1)),
    };
    ControlProblem::new("steep-sigma-1d", vec!["0".into()], 1, 1, 16.0, Arc::new(coef))
}

/// `ode1d` with the running payoff scaled by `s`; the value scales linearly.
pub fn scaled_running_1d(s: f64) -> ControlProblem {
    const_sigma_problem(
        "scaled-running-1d",
        vec!["0".into()],
        1,
        1,
        8.0,
        vec![DMatrix::from_element(1, 1, 2.0f64.sqrt())],
        0.0,
        Box::new(move |_a, _x| s),
        zero_scalar(),
        zero_scalar(),
        Box::new(|_x| 0.0),
        Box::new(|_x| DVector::zeros(1)),
        Box::new(|_x| DMatrix::zeros(1, 1)),
    )
}

/// Terminal-payoff-only probe: `g` quadratic along a direction, everything
/// else zero; used for estimator plumbing tests.
pub fn quadratic_terminal_1d() -> ControlProblem {
    const_sigma_problem(
        "quadratic-terminal-1d",
        vec!["0".into()],
        1,
        1,
        8.0,
        vec![DMatrix::from_element(1, 1, 2.0f64.sqrt())],
        0.0,
        Box::new(|_a, _x| 0.0),
        zero_scalar(),
        zero_scalar(),
        Box::new(|x: &VecF| x[0] * x[0]),
        Box::new(|x: &VecF| DVector::from_element(1, 2.0 * x[0])),
        Box::new(|_x| DMatrix::from_element(1, 1, 2.0)),
    )
}

/// Default domain for each built-in problem.
pub fn default_domain(problem_name: &str) -> Domain {
    match problem_name {
        "ode1d" | "ode1d-smooth" | "twocontrol1d" | "twocontrol1d-swapped"
        | "scaled-isotropic-1d" | "steep-sigma-1d" | "quadratic-terminal-1d" => {
            Domain::ball(&[0.0], 1.0)
        }
        "linear-sigma-1d" => Domain::ball(&[3.0], 1.0),
        "ball2d" | "degenerate2d" | "paper-example-exa" | "axis-degenerate-2d" => {
            Domain::ball(&[0.0, 0.0], 1.0)
        }
        other => panic!("no default domain for problem {other}"),
    }
}

/// Problem registry entry for the catalog and config lookup.
pub struct BuiltinProblem {
    pub name: &'static str,
    pub description: &'static str,
    pub make: fn() -> ControlProblem,
    pub solution: Option<fn() -> AnalyticSolution>,
}

pub fn problem_catalog() -> Vec<BuiltinProblem> {
    vec![
        BuiltinProblem {
            name: "ode1d",
            description: "1D isotropic benchmark: sigma=sqrt(2), f=1, g=0; value (1-x^2)/2",
            make: ode1d,
            solution: Some(ode1d_solution),
        },
        BuiltinProblem {
            name: "ode1d-smooth",
            description: "1D benchmark with discount: value cos(pi x/2), genuinely curved error",
            make: ode1d_smooth,
            solution: Some(ode1d_smooth_solution),
        },
        BuiltinProblem {
            name: "twocontrol1d",
            description: "two diffusions a in {1,2}, f=-1; optimal control 2, value (x^2-1)/4",
            make: || twocontrol1d(-1.0),
            solution: Some(|| twocontrol1d_solution(-1.0)),
        },
        BuiltinProblem {
            name: "ball2d",
            description: "2D isotropic disk benchmark: sigma=sqrt(2) I, f=1; value (1-|x|^2)/4",
            make: ball2d,
            solution: Some(ball2d_solution),
        },
        BuiltinProblem {
            name: "degenerate2d",
            description: "rank-one diffusion along (1, 1+x1/4); wide-stencil grid fallback active",
            make: degenerate2d,
            solution: None,
        },
        BuiltinProblem {
            name: "paper-example-exa",
            description: "operator u_11 + 2 u_12 + u_22: degenerate except along (1,1); value (x1-x2)^2",
            make: paper_example_exa,
            solution: Some(paper_example_exa_solution),
        },
    ]
}

pub fn problem_by_name(name: &str) -> Option<ControlProblem> {
    problem_catalog()
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| (p.make)())
}

pub fn solution_by_name(name: &str) -> Option<AnalyticSolution> {
    problem_catalog()
        .into_iter()
        .find(|p| p.name == name)
        .and_then(|p| p.solution.map(|s| s()))
}

/// Built-in experiment presets understood by the runner.
pub fn experiment_catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        ("ode1d-value", "Monte Carlo + oracle value at the origin of ode1d"),
        ("ode1d-deriv", "three first-derivative routes on ode1d at x=0.5"),
        ("twocontrol-sup", "sup estimator and oracle policy on twocontrol1d"),
        ("mu-exa", "nondegeneracy functional on the paper-example-exa matrix"),
        ("probe-convergence", "perturbed-path convergence ladders on ode1d"),
        ("gap-exit", "exit-time gap ladder on ode1d"),
        ("barriers-1d", "barrier supermartingale verdicts on ode1d"),
        ("moments-1d", "quasiderivative moment ratios along a depth ladder"),
        ("bounds-derivative", "interior derivative-bound ratios via the oracle"),
        ("oracle-selfcheck", "residual, uniqueness and grid-halving checks"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn catalog_contains_required_names() {
        let names: Vec<_> = problem_catalog().iter().map(|p| p.name).collect();
        assert!(names.contains(&"ode1d"));
        assert!(names.contains(&"paper-example-exa"));
        assert!(!names.is_empty());
    }

    #[test]
    fn exa_matrix_is_ones() {
        let p = paper_example_exa();
        let a = p.a(0, &DVector::from_column_slice(&[0.1, -0.2]));
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(a[(i, j)], 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn generator_on_level_function_matches_hand_value() {
        // ode1d: L psi = tr(a psi_xx) = 1 * (-2) = -2; with f=1 value ODE
        // normalization needs no rescale.
        let p = ode1d();
        let dom = default_domain("ode1d");
        let l = p.generator_applied(0, &DVector::from_column_slice(&[0.3]), &dom);
        assert_relative_eq!(l, -2.0, epsilon = 1e-12);
    }
}
