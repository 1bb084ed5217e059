//! Route-consistency checks: on single-control benchmarks the three
//! first-derivative routes (common-random-number central difference,
//! pathwise representation, grid oracle) agree pairwise within
//! `3 combined stderr + 0.05`.

use qdlab::builtins;
use qdlab::engine::{Caps, MarkovPolicy};
use qdlab::estimators::{
    estimate_first_derivative_fd, estimate_first_derivative_quasi, AnalyticProvider, QuasiConfig,
};
use qdlab::geometry::Levels;
use qdlab::oracle::{oracle_derivatives, solve_bellman_fd, InitialGuess};
use qdlab::problem::InteriorCondition;
use qdlab::recipe::RecipeMode;
use qdlab::VecF;

fn vx(v: &[f64]) -> VecF {
    VecF::from_column_slice(v)
}

fn pair_ok(a: f64, sa: f64, b: f64, sb: f64) -> bool {
    (a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt() + 0.05
}

struct Case {
    name: &'static str,
    problem: qdlab::problem::ControlProblem,
    solution: builtins::AnalyticSolution,
    domain_name: &'static str,
    x0: Vec<f64>,
    xi: Vec<f64>,
    oracle_h: f64,
    exact: f64,
}

fn run_case(case: Case, n_paths: usize) {
    let dom = builtins::default_domain(case.domain_name);
    let cond = InteriorCondition::zero(case.problem.d, case.problem.d1);
    let x0 = vx(&case.x0);
    let xi = vx(&case.xi);
    let provider = AnalyticProvider(case.solution);
    let config = QuasiConfig {
        caps: Caps {
            xi_cap: 3.0,
            dt_boundary_factor: 0.02,
            dt0: 1e-3,
            ..Caps::default()
        },
        levels: Levels::default(),
        upsilon_floor: 1e-4,
        recipe_mode: RecipeMode::Auto,
    };
    let policy = MarkovPolicy::Constant(0);
    let quasi = estimate_first_derivative_quasi(
        &case.problem,
        &dom,
        &cond,
        &x0,
        &xi,
        &policy,
        n_paths,
        &config,
        2026,
        &provider,
    )
    .unwrap();
    let fd = estimate_first_derivative_fd(
        &case.problem,
        &dom,
        &x0,
        &xi,
        0.05,
        &policy,
        n_paths,
        Caps {
            dt0: 1e-3,
            ..Caps::default()
        },
        2026,
    )
    .unwrap();
    let sol = solve_bellman_fd(&case.problem, &dom, case.oracle_h, 1e-9, InitialGuess::Zeros)
        .unwrap();
    let (_, oracle_d1, _) = oracle_derivatives(&sol, &x0, &xi).unwrap();

    assert!(
        pair_ok(quasi.mean, quasi.stderr, fd.mean, fd.stderr),
        "{}: quasi {}+-{} vs fd {}+-{}",
        case.name,
        quasi.mean,
        quasi.stderr,
        fd.mean,
        fd.stderr
    );
    assert!(
        pair_ok(quasi.mean, quasi.stderr, oracle_d1, 0.0),
        "{}: quasi {}+-{} vs oracle {}",
        case.name,
        quasi.mean,
        quasi.stderr,
        oracle_d1
    );
    assert!(
        pair_ok(fd.mean, fd.stderr, oracle_d1, 0.0),
        "{}: fd {}+-{} vs oracle {}",
        case.name,
        fd.mean,
        fd.stderr,
        oracle_d1
    );
    // The routes also sit near the closed form (same tolerance discipline).
    assert!(
        pair_ok(quasi.mean, quasi.stderr, case.exact, 0.0),
        "{}: quasi {}+-{} vs exact {}",
        case.name,
        quasi.mean,
        quasi.stderr,
        case.exact
    );
}

#[test]
fn routes_agree_on_plain_1d() {
    run_case(
        Case {
            name: "ode1d",
            problem: builtins::ode1d(),
            solution: builtins::ode1d_solution(),
            domain_name: "ode1d",
            x0: vec![0.5],
            xi: vec![1.0],
            oracle_h: 2e-3,
            exact: -0.5,
        },
        6000,
    );
}

#[test]
fn routes_agree_on_discounted_1d() {
    // Unit discount and a curved running payoff exercise the discount
    // derivative and payoff-derivative coordinates of the representation.
    run_case(
        Case {
            name: "ode1d-smooth",
            problem: builtins::ode1d_smooth(),
            solution: builtins::ode1d_smooth_solution(),
            domain_name: "ode1d",
            x0: vec![0.5],
            xi: vec![1.0],
            oracle_h: 2e-3,
            exact: -(std::f64::consts::PI / 2.0)
                * (std::f64::consts::PI / 4.0).sin(),
        },
        6000,
    );
}

#[test]
fn routes_agree_on_isotropic_2d() {
    run_case(
        Case {
            name: "ball2d",
            problem: builtins::ball2d(),
            solution: builtins::ball2d_solution(),
            domain_name: "ball2d",
            x0: vec![0.5, 0.0],
            xi: vec![1.0, 0.0],
            oracle_h: 0.02,
            exact: -0.25,
        },
        4000,
    );
}

/// Second-derivative pathwise estimator on the plain 1D benchmark:
/// the curvature is -1 everywhere.
#[test]
fn second_derivative_on_plain_1d() {
    use qdlab::estimators::estimate_second_derivative_quasi;
    let p = builtins::ode1d();
    let dom = builtins::default_domain("ode1d");
    let cond = InteriorCondition::zero(1, 1);
    let provider = AnalyticProvider(builtins::ode1d_solution());
    let config = QuasiConfig {
        caps: Caps {
            xi_cap: 3.0,
            dt_boundary_factor: 0.02,
            dt0: 1e-3,
            ..Caps::default()
        },
        levels: Levels::default(),
        upsilon_floor: 1e-4,
        recipe_mode: RecipeMode::Auto,
    };
    let est = estimate_second_derivative_quasi(
        &p,
        &dom,
        &cond,
        &vx(&[0.5]),
        &vx(&[1.0]),
        &MarkovPolicy::Constant(0),
        8000,
        &config,
        2027,
        &provider,
    )
    .unwrap();
    assert!(
        (est.mean + 1.0).abs() <= 3.0 * est.stderr + 0.1,
        "second derivative {} +- {}",
        est.mean,
        est.stderr
    );
}

/// Selecting the smaller diffusion: with a positive running payoff the
/// slower exit pays more, so the sup over constant policies flips.
#[test]
fn sup_flips_with_payoff_sign() {
    use qdlab::estimators::estimate_value_sup;
    let p = builtins::twocontrol1d(1.0);
    let dom = builtins::default_domain("twocontrol1d");
    let (est, argmax) = estimate_value_sup(
        &p,
        &dom,
        &vx(&[0.0]),
        &[MarkovPolicy::Constant(0), MarkovPolicy::Constant(1)],
        4000,
        Caps::default(),
        2028,
    );
    assert_eq!(argmax, 0, "smaller diffusion wins for positive payoff");
    assert!(
        (est.mean - 0.5).abs() <= 3.0 * est.stderr + 0.05,
        "sup value {} +- {}",
        est.mean,
        est.stderr
    );
}

/// Exit-time gap on the isotropic disk from the psi = lambda level: a
/// normal start direction displaces the perturbed process a first-order
/// depth toward the stopping surface, while a tangential one moves it along
/// the level set (second-order depth change), so at matched epsilon the
/// tangential gap is smaller (paired comparison on a short band where the
/// deterministic offset dominates the angular decorrelation of the noise).
#[test]
fn gap_smaller_for_tangential_direction() {
    use qdlab::engine::{ProcessSet, SimSpec, StopRegion};
    use qdlab::estimators::exit_time_gap_table;
    let p = builtins::ball2d();
    let dom = builtins::default_domain("ball2d");
    let cond = InteriorCondition::zero(2, 2);
    let levels = Levels::default();
    // On the psi = lambda level; the inward normal there is -e1.
    let x0 = dom
        .point_at_psi(&vx(&[1.0, 0.0]), levels.lambda)
        .unwrap();
    let caps = Caps {
        dt0: 5e-4,
        dt_boundary_factor: 1e-3,
        ..Caps::default()
    };
    let spec = SimSpec::new(ProcessSet::with_perturbed())
        .with_caps(caps)
        .with_levels(levels)
        .with_stop_region(StopRegion::PsiBand { lo: 0.02, hi: 0.3 })
        .with_upsilon_floor(1e-4);
    let run = |xi: VecF| {
        exit_time_gap_table(
            &p,
            &dom,
            &cond,
            &x0,
            &xi,
            &[0.1],
            &[MarkovPolicy::Constant(0)],
            &spec,
            2029,
            3000,
        )
    };
    let normal = run(vx(&[-0.05, 0.0]));
    let tangential = run(vx(&[0.0, 0.05]));
    assert!(
        tangential[0].gap < normal[0].gap,
        "tangential {} vs normal {}",
        tangential[0].gap,
        normal[0].gap
    );
}
