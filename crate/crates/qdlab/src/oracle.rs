//! Grid Bellman solver: Howard policy iteration on monotone finite
//! difference stencils over 1D/2D rectilinear grids masked to the domain.
//!
//! Boundary handling: axis stencil arms are cut at the zero level set with
//! unequal-spacing second differences (the cut value comes from the terminal
//! payoff at the crossing point); diagonal neighbors that fall outside take
//! the payoff at their boundary projection. Nodes where the cross derivative
//! dominates the axis terms fall back to a wide stencil built from the
//! eigendirections of the diffusion matrix, and the affected node set is
//! recorded with the solution.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimators::{EstimatorError, ValueProvider};
use crate::geometry::Domain;
use crate::problem::ControlProblem;
use crate::{MatF, VecF};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid too coarse: axis {axis} has {count} interior nodes, need at least 5")]
    GridTooCoarse { axis: usize, count: usize },
    #[error("query point too close to the boundary for the interpolation stencil")]
    OutOfStencil,
    #[error("linear sub-solve failed to reach tolerance: residual {residual:e}")]
    LinearSolveFailed { residual: f64 },
    #[error("oracle supports only 1 or 2 dimensions, got {0}")]
    BadDimension(usize),
}

/// Rectilinear grid over the domain bounding box.
#[derive(Debug, Clone)]
pub struct Grid {
    pub d: usize,
    pub lo: Vec<f64>,
    pub h: f64,
    pub shape: Vec<usize>,
}

impl Grid {
    fn build(domain: &Domain, h: f64) -> Grid {
        let d = domain.dim;
        let (lo, hi) = &domain.bounding_box;
        let mut shape = Vec::with_capacity(d);
        let mut lo_out = Vec::with_capacity(d);
        for i in 0..d {
            let n = ((hi[i] - lo[i]) / h).ceil() as usize + 1;
            shape.push(n);
            lo_out.push(lo[i]);
        }
        Grid {
            d,
            lo: lo_out,
            h,
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize) -> VecF {
        let mut rem = idx;
        let mut coords = vec![0.0; self.d];
        for axis in 0..self.d {
            let i = rem % self.shape[axis];
            rem /= self.shape[axis];
            coords[axis] = self.lo[axis] + i as f64 * self.h;
        }
        VecF::from_vec(coords)
    }

    pub fn multi(&self, idx: usize) -> Vec<usize> {
        let mut rem = idx;
        let mut m = vec![0usize; self.d];
        for axis in 0..self.d {
            m[axis] = rem % self.shape[axis];
            rem /= self.shape[axis];
        }
        m
    }

    pub fn flat(&self, m: &[usize]) -> usize {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for axis in 0..self.d {
            idx += m[axis] * stride;
            stride *= self.shape[axis];
        }
        idx
    }

    fn neighbor(&self, idx: usize, offset: &[isize]) -> Option<usize> {
        let m = self.multi(idx);
        let mut out = vec![0usize; self.d];
        for axis in 0..self.d {
            let v = m[axis] as isize + offset[axis];
            if v < 0 || v as usize >= self.shape[axis] {
                return None;
            }
            out[axis] = v as usize;
        }
        Some(self.flat(&out))
    }
}

/// One assembled stencil row representing `L^alpha v - c^alpha v` at a node:
/// `diag * v_i + sum cols * v_j + constant` (the constant carries boundary
/// data contributions).
#[derive(Debug, Clone, Default)]
struct Row {
    cols: Vec<(usize, f64)>,
    diag: f64,
    constant: f64,
}

/// Converged grid solution with nodal policy, residual and node diagnostics.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub grid: Grid,
    pub interior: Vec<bool>,
    pub v: Vec<f64>,
    pub policy: Vec<usize>,
    pub residual: Vec<f64>,
    pub h: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub wide_stencil_nodes: Vec<usize>,
    pub cut_nodes: Vec<usize>,
    pub warning: Option<String>,
}

impl GridSolution {
    pub fn max_residual(&self) -> f64 {
        self.residual
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()))
    }

    pub fn policy_as_markov(&self) -> crate::engine::MarkovPolicy {
        let d = self.grid.d;
        let lo = VecF::from_column_slice(&self.grid.lo);
        let hi = VecF::from_fn(d, |i, _| {
            self.grid.lo[i] + (self.grid.shape[i] - 1) as f64 * self.grid.h
        });
        crate::engine::MarkovPolicy::Grid {
            lo,
            hi,
            shape: self.grid.shape.clone(),
            labels: self.policy.clone(),
        }
    }
}

/// Initial guess for the policy iteration.
#[derive(Debug, Clone, Copy)]
pub enum InitialGuess {
    Zeros,
    /// Terminal payoff evaluated at every node.
    TerminalExtension,
    /// Uniform in [-size, size] with size from the payoff scale, seeded.
    RandomBounded(u64),
}

struct Assembly {
    rows: Vec<Vec<Row>>, // [control][node], empty row for exterior nodes
    f: Vec<Vec<f64>>,    // [control][node]
    interior: Vec<usize>,
    interior_mask: Vec<bool>,
    wide_nodes: Vec<usize>,
    cut_nodes: Vec<usize>,
}

/// Cut distance along the axis segment from an interior point to an outside
/// neighbor, together with the crossing point.
fn cut_point(domain: &Domain, from: &VecF, axis: usize, dir: f64, h: f64) -> (f64, VecF) {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let mut x = from.clone();
        x[axis] += dir * mid * h;
        if domain.psi(&x) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = (0.5 * (lo + hi)).max(1e-6);
    let mut x = from.clone();
    x[axis] += dir * theta * h;
    (theta, x)
}

const WIDE_OFFSETS: [[isize; 2]; 8] = [
    [1, 0],
    [0, 1],
    [1, 1],
    [1, -1],
    [2, 1],
    [1, 2],
    [2, -1],
    [1, -2],
];

fn add_target(row: &mut Row, target: &(Option<usize>, f64), coef: f64) {
    match target {
        (Some(j), _) => row.cols.push((*j, coef)),
        (None, bval) => row.constant += coef * bval,
    }
}

fn assemble(
    problem: &ControlProblem,
    domain: &Domain,
    grid: &Grid,
) -> Result<Assembly, OracleError> {
    let d = grid.d;
    if d > 2 {
        return Err(OracleError::BadDimension(d));
    }
    let n = grid.len();
    let n_controls = problem.n_controls();
    let h = grid.h;

    let interior_mask: Vec<bool> = (0..n).map(|i| domain.psi(&grid.point(i)) > 0.0).collect();
    for axis in 0..d {
        let mut count_max = 0usize;
        let other: usize = if d == 2 { 1 - axis } else { 0 };
        let lines = if d == 2 { grid.shape[other] } else { 1 };
        for line in 0..lines {
            let mut count = 0usize;
            for i in 0..grid.shape[axis] {
                let mut m = vec![0usize; d];
                m[axis] = i;
                if d == 2 {
                    m[other] = line;
                }
                if interior_mask[grid.flat(&m)] {
                    count += 1;
                }
            }
            count_max = count_max.max(count);
        }
        if count_max < 5 {
            return Err(OracleError::GridTooCoarse {
                axis,
                count: count_max,
            });
        }
    }

    let interior: Vec<usize> = (0..n).filter(|&i| interior_mask[i]).collect();
    let mut rows: Vec<Vec<Row>> = vec![vec![Row::default(); n]; n_controls];
    let mut f: Vec<Vec<f64>> = vec![vec![0.0; n]; n_controls];
    let mut wide_nodes: Vec<usize> = Vec::new();
    let mut cut_nodes: Vec<usize> = Vec::new();

    for &i in &interior {
        let x = grid.point(i);
        // Per-axis arm data shared across controls:
        // (distance, interior neighbor, boundary value).
        let mut arm: Vec<[(f64, Option<usize>, f64); 2]> = Vec::with_capacity(d);
        let mut is_cut = false;
        for axis in 0..d {
            let mut sides = [(h, None, 0.0); 2];
            for (si, slot) in [(-1isize, 0usize), (1, 1)] {
                let mut off = vec![0isize; d];
                off[axis] = si;
                match grid.neighbor(i, &off) {
                    Some(j) if interior_mask[j] => {
                        sides[slot] = (h, Some(j), 0.0);
                    }
                    _ => {
                        let (theta, bpt) = cut_point(domain, &x, axis, si as f64, h);
                        is_cut = true;
                        sides[slot] = (theta * h, None, problem.terminal(&bpt));
                    }
                }
            }
            arm.push(sides);
        }
        if is_cut {
            cut_nodes.push(i);
        }

        for alpha in 0..n_controls {
            let a = problem.a(alpha, &x);
            let b = problem.drift(alpha, &x);
            let c = problem.discount(alpha, &x);
            f[alpha][i] = problem.running(alpha, &x);
            let mut row = Row::default();

            let needs_wide = d == 2 && {
                let a12 = a[(0, 1)];
                a[(0, 0)] - a12.abs() < -1e-14 || a[(1, 1)] - a12.abs() < -1e-14
            };

            if needs_wide {
                wide_nodes.push(i);
                let sym = (&a + a.transpose()) * 0.5;
                let eig = sym.symmetric_eigen();
                for k in 0..2 {
                    let lam = eig.eigenvalues[k].max(0.0);
                    if lam <= 1e-14 {
                        continue;
                    }
                    let w = eig.eigenvectors.column(k).clone_owned();
                    let mut best = WIDE_OFFSETS[0];
                    let mut best_cos = -1.0;
                    for cand in WIDE_OFFSETS {
                        let p = VecF::from_column_slice(&[cand[0] as f64, cand[1] as f64]);
                        let cosv = (w.dot(&p) / p.norm()).abs();
                        if cosv > best_cos {
                            best_cos = cosv;
                            best = cand;
                        }
                    }
                    let p_norm_sq = (best[0] * best[0] + best[1] * best[1]) as f64;
                    let denom = h * h * p_norm_sq;
                    for sgn in [1isize, -1] {
                        let off = [best[0] * sgn, best[1] * sgn];
                        let target = resolve_target(grid, domain, problem, &interior_mask, i, &off);
                        add_target(&mut row, &target, lam / denom);
                    }
                    row.diag += -2.0 * lam / denom;
                }
            } else {
                // Axis second differences with unequal spacing at cuts; in
                // the slanted split each axis coefficient is reduced by the
                // cross magnitude.
                for axis in 0..d {
                    let akk = a[(axis, axis)];
                    let cross = if d == 2 { a[(0, 1)] } else { 0.0 };
                    let coef = akk - cross.abs();
                    let (hm, jm, bm) = arm[axis][0];
                    let (hp, jp, bp) = arm[axis][1];
                    if coef > 0.0 {
                        let cm = 2.0 * coef / (hm * (hm + hp));
                        let cp = 2.0 * coef / (hp * (hm + hp));
                        add_target(&mut row, &(jm, bm), cm);
                        add_target(&mut row, &(jp, bp), cp);
                        row.diag += -(cm + cp);
                    }
                }
                if d == 2 {
                    let a12 = a[(0, 1)];
                    if a12.abs() > 1e-14 {
                        let (dir1, dir2): ([isize; 2], [isize; 2]) = if a12 > 0.0 {
                            ([1, 1], [-1, -1])
                        } else {
                            ([1, -1], [-1, 1])
                        };
                        let coef = a12.abs() / (h * h);
                        for off in [dir1, dir2] {
                            let target =
                                resolve_target(grid, domain, problem, &interior_mask, i, &off);
                            add_target(&mut row, &target, coef);
                        }
                        row.diag += -2.0 * coef;
                    }
                }
            }

            // Upwind first differences on (possibly cut) arms.
            for axis in 0..d {
                let bi = b[axis];
                if bi == 0.0 {
                    continue;
                }
                let (hm, jm, bm) = arm[axis][0];
                let (hp, jp, bp) = arm[axis][1];
                if bi > 0.0 {
                    let coef = bi / hp;
                    add_target(&mut row, &(jp, bp), coef);
                    row.diag += -coef;
                } else {
                    let coef = -bi / hm;
                    add_target(&mut row, &(jm, bm), coef);
                    row.diag += -coef;
                }
            }

            row.diag += -c;
            rows[alpha][i] = row;
        }
    }
    wide_nodes.sort_unstable();
    wide_nodes.dedup();
    Ok(Assembly {
        rows,
        f,
        interior,
        interior_mask,
        wide_nodes,
        cut_nodes,
    })
}

/// Resolve a stencil offset to either an interior column or a boundary value
/// (payoff at the outside point's projection onto the boundary).
fn resolve_target(
    grid: &Grid,
    domain: &Domain,
    problem: &ControlProblem,
    interior_mask: &[bool],
    i: usize,
    off: &[isize; 2],
) -> (Option<usize>, f64) {
    let offv: Vec<isize> = off.iter().cloned().take(grid.d).collect();
    match grid.neighbor(i, &offv) {
        Some(j) if interior_mask[j] => (Some(j), 0.0),
        other => {
            let pt = match other {
                Some(j) => grid.point(j),
                None => {
                    let mut x = grid.point(i);
                    for axis in 0..grid.d {
                        x[axis] += off[axis] as f64 * grid.h;
                    }
                    x
                }
            };
            let bval = match domain.project_to_boundary(&pt, 1e-10) {
                Ok(bp) => problem.terminal(&bp),
                Err(_) => problem.terminal(&pt),
            };
            (None, bval)
        }
    }
}

fn operator_value(row: &Row, v: &[f64], vi: f64) -> f64 {
    let mut s = row.diag * vi + row.constant;
    for &(j, coef) in &row.cols {
        s += coef * v[j];
    }
    s
}

/// Thomas-style direct solve in 1D (tridiagonal in node order), SOR in 2D.
fn linear_solve(
    assembly: &Assembly,
    policy: &[usize],
    grid: &Grid,
    v: &mut [f64],
    tol_lin: f64,
) -> Result<(), OracleError> {
    if grid.d == 1 {
        let nodes = &assembly.interior;
        let m = nodes.len();
        let mut sub = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut sup = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        let pos: std::collections::HashMap<usize, usize> =
            nodes.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        for (k, &i) in nodes.iter().enumerate() {
            let row = &assembly.rows[policy[i]][i];
            diag[k] = row.diag;
            rhs[k] = -(assembly.f[policy[i]][i] + row.constant);
            for &(j, coef) in &row.cols {
                let kj = pos[&j];
                if kj + 1 == k {
                    sub[k] += coef;
                } else if kj == k + 1 {
                    sup[k] += coef;
                } else if kj == k {
                    diag[k] += coef;
                } else {
                    return Err(OracleError::LinearSolveFailed { residual: f64::NAN });
                }
            }
        }
        for k in 1..m {
            let w = sub[k] / diag[k - 1];
            diag[k] -= w * sup[k - 1];
            rhs[k] -= w * rhs[k - 1];
        }
        let mut sol = vec![0.0; m];
        if m > 0 {
            sol[m - 1] = rhs[m - 1] / diag[m - 1];
            for k in (0..m - 1).rev() {
                sol[k] = (rhs[k] - sup[k] * sol[k + 1]) / diag[k];
            }
        }
        for (k, &i) in nodes.iter().enumerate() {
            v[i] = sol[k];
        }
        Ok(())
    } else {
        let omega = 1.8;
        let nodes = &assembly.interior;
        let mut scale = 1.0f64;
        let mut max_diag = 0.0f64;
        for &i in nodes {
            let row = &assembly.rows[policy[i]][i];
            scale = scale.max((assembly.f[policy[i]][i] + row.constant).abs());
            max_diag = max_diag.max(row.diag.abs());
        }
        let max_sweeps = 200_000usize;
        let residual = |v: &[f64]| -> f64 {
            let mut res = 0.0f64;
            for &i in nodes {
                let row = &assembly.rows[policy[i]][i];
                res = res.max((operator_value(row, v, v[i]) + assembly.f[policy[i]][i]).abs());
            }
            res
        };
        for sweep in 0..max_sweeps {
            for &i in nodes {
                let row = &assembly.rows[policy[i]][i];
                let mut s = row.constant + assembly.f[policy[i]][i];
                for &(j, coef) in &row.cols {
                    s += coef * v[j];
                }
                let vnew = -s / row.diag;
                v[i] = (1.0 - omega) * v[i] + omega * vnew;
            }
            if sweep % 64 == 63 {
                let res = residual(v);
                // Round-off floor of the residual evaluation itself.
                let v_inf = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                let floor = 64.0 * f64::EPSILON * max_diag * v_inf.max(1.0);
                if res <= (tol_lin * scale).max(floor) {
                    return Ok(());
                }
            }
        }
        let res = residual(v);
        Err(OracleError::LinearSolveFailed { residual: res })
    }
}

/// Howard policy iteration: alternate the linear solve at a fixed policy
/// with the nodal argmax update; terminates when the policy is stable and
/// the Bellman residual is within tolerance. Policy cycles terminate at the
/// best residual with a warning on the solution.
pub fn solve_bellman_fd(
    problem: &ControlProblem,
    domain: &Domain,
    h: f64,
    tol: f64,
    init: InitialGuess,
) -> Result<GridSolution, OracleError> {
    let grid = Grid::build(domain, h);
    let assembly = assemble(problem, domain, &grid)?;
    let n = grid.len();
    let mut v = vec![0.0f64; n];
    match init {
        InitialGuess::Zeros => {}
        InitialGuess::TerminalExtension => {
            for &i in &assembly.interior {
                v[i] = problem.terminal(&grid.point(i));
            }
        }
        InitialGuess::RandomBounded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut size = 1.0f64;
            for &i in &assembly.interior {
                size = size.max(problem.terminal(&grid.point(i)).abs());
            }
            for &i in &assembly.interior {
                v[i] = rng.gen_range(-size..size);
            }
        }
    }
    let mut policy = vec![0usize; n];
    let tol_lin = (tol * 1e-2).min(1e-10);
    let mut residual_history: Vec<f64> = Vec::new();
    let mut warning = None;
    let mut seen_policies: Vec<u64> = Vec::new();
    let mut iterations = 0usize;

    let policy_hash = |p: &[usize]| -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for &pi in p {
            acc ^= pi as u64 + 1;
            acc = acc.wrapping_mul(0x100000001b3);
        }
        acc
    };

    let bellman_res = |v: &[f64]| -> f64 {
        let mut worst = 0.0f64;
        for &i in &assembly.interior {
            let mut best = f64::NEG_INFINITY;
            for alpha in 0..problem.n_controls() {
                let row = &assembly.rows[alpha][i];
                best = best.max(operator_value(row, v, v[i]) + assembly.f[alpha][i]);
            }
            worst = worst.max(best.abs());
        }
        worst
    };

    for iter in 0..200 {
        iterations = iter + 1;
        let mut new_policy = policy.clone();
        for &i in &assembly.interior {
            let mut best_alpha = 0usize;
            let mut best = f64::NEG_INFINITY;
            for alpha in 0..problem.n_controls() {
                let row = &assembly.rows[alpha][i];
                let val = operator_value(row, &v, v[i]) + assembly.f[alpha][i];
                if val > best + 1e-14 {
                    best = val;
                    best_alpha = alpha;
                }
            }
            new_policy[i] = best_alpha;
        }
        let stable = new_policy == policy && iter > 0;
        policy = new_policy;
        let hash = policy_hash(&policy);
        let cycled = seen_policies.contains(&hash) && !stable;
        seen_policies.push(hash);

        linear_solve(&assembly, &policy, &grid, &mut v, tol_lin)?;
        let res = bellman_res(&v);
        residual_history.push(res);

        if res <= tol && (stable || problem.n_controls() == 1) {
            break;
        }
        if cycled && residual_history.len() >= 2 {
            let prev = residual_history[residual_history.len() - 2];
            if res >= prev - 1e-15 {
                warning = Some(format!(
                    "policy cycle detected at iteration {iterations}; stopping at residual {res:e}"
                ));
                break;
            }
        }
    }

    let mut residual = vec![0.0f64; n];
    for &i in &assembly.interior {
        let mut best = f64::NEG_INFINITY;
        for alpha in 0..problem.n_controls() {
            let row = &assembly.rows[alpha][i];
            best = best.max(operator_value(row, &v, v[i]) + assembly.f[alpha][i]);
        }
        residual[i] = best;
    }

    Ok(GridSolution {
        interior: assembly.interior_mask.clone(),
        v,
        policy,
        residual,
        h,
        iterations,
        residual_history,
        wide_stencil_nodes: assembly.wide_nodes.clone(),
        cut_nodes: assembly.cut_nodes.clone(),
        warning,
        grid,
    })
}

/// Discrete Bellman residual of a (possibly perturbed) nodal function at the
/// given points (nearest interior node per point).
pub fn bellman_residual(
    problem: &ControlProblem,
    domain: &Domain,
    solution: &GridSolution,
    x_set: &[VecF],
) -> Result<f64, OracleError> {
    let assembly = assemble(problem, domain, &solution.grid)?;
    let mut worst = 0.0f64;
    for x in x_set {
        let i = nearest_interior_node(solution, x).ok_or(OracleError::OutOfStencil)?;
        let mut best = f64::NEG_INFINITY;
        for alpha in 0..problem.n_controls() {
            let row = &assembly.rows[alpha][i];
            best =
                best.max(operator_value(row, &solution.v, solution.v[i]) + assembly.f[alpha][i]);
        }
        worst = worst.max(best.abs());
    }
    Ok(worst)
}

fn nearest_interior_node(sol: &GridSolution, x: &VecF) -> Option<usize> {
    let g = &sol.grid;
    let mut m = vec![0usize; g.d];
    for axis in 0..g.d {
        let t = ((x[axis] - g.lo[axis]) / g.h).round();
        m[axis] = (t.max(0.0) as usize).min(g.shape[axis] - 1);
    }
    let i = g.flat(&m);
    if sol.interior[i] {
        Some(i)
    } else {
        None
    }
}

/// Tensor local quadratic interpolation of the nodal solution at `x`.
/// Requires the full 3^d window around `x` to be interior.
pub fn interpolate(sol: &GridSolution, x: &VecF) -> Result<f64, OracleError> {
    let g = &sol.grid;
    let mut base = vec![0usize; g.d];
    for axis in 0..g.d {
        let t = (x[axis] - g.lo[axis]) / g.h;
        let c = (t.round() as isize).clamp(1, g.shape[axis] as isize - 2) as usize;
        base[axis] = c;
    }
    let mut weights: Vec<[f64; 3]> = Vec::with_capacity(g.d);
    for axis in 0..g.d {
        let xc = g.lo[axis] + base[axis] as f64 * g.h;
        let s = (x[axis] - xc) / g.h;
        weights.push([
            0.5 * s * (s - 1.0),
            (1.0 - s) * (1.0 + s),
            0.5 * s * (s + 1.0),
        ]);
    }
    let mut acc = 0.0f64;
    match g.d {
        1 => {
            for (wi, di) in weights[0].iter().zip([-1isize, 0, 1]) {
                let m = [(base[0] as isize + di) as usize];
                let idx = g.flat(&m);
                if !sol.interior[idx] {
                    return Err(OracleError::OutOfStencil);
                }
                acc += wi * sol.v[idx];
            }
        }
        2 => {
            for (wi, di) in weights[0].iter().zip([-1isize, 0, 1]) {
                for (wj, dj) in weights[1].iter().zip([-1isize, 0, 1]) {
                    let m = [
                        (base[0] as isize + di) as usize,
                        (base[1] as isize + dj) as usize,
                    ];
                    let idx = g.flat(&m);
                    if !sol.interior[idx] {
                        return Err(OracleError::OutOfStencil);
                    }
                    acc += wi * wj * sol.v[idx];
                }
            }
        }
        other => return Err(OracleError::BadDimension(other)),
    }
    Ok(acc)
}

/// Value and first/second directional derivatives along `xi` via
/// interpolation and centered differences with step `h`.
pub fn oracle_derivatives(
    sol: &GridSolution,
    x: &VecF,
    xi: &VecF,
) -> Result<(f64, f64, f64), OracleError> {
    let u = xi / xi.norm();
    let s = sol.h;
    let v0 = interpolate(sol, x)?;
    let vp = interpolate(sol, &(x + &u * s))?;
    let vm = interpolate(sol, &(x - &u * s))?;
    let d1 = (vp - vm) / (2.0 * s) * xi.norm();
    let d2 = (vp - 2.0 * v0 + vm) / (s * s) * xi.norm_squared();
    Ok((v0, d1, d2))
}

/// Runs the solver from several initial guesses and reports the maximum
/// pairwise sup-distance between the converged solutions.
pub fn uniqueness_probe(
    problem: &ControlProblem,
    domain: &Domain,
    h: f64,
    tol: f64,
    n_inits: usize,
) -> Result<(f64, Vec<GridSolution>), OracleError> {
    assert!(n_inits >= 2);
    let mut inits = vec![InitialGuess::Zeros, InitialGuess::TerminalExtension];
    for k in 2..n_inits {
        inits.push(InitialGuess::RandomBounded(1000 + k as u64));
    }
    let sols: Vec<GridSolution> = inits
        .iter()
        .take(n_inits)
        .map(|&init| solve_bellman_fd(problem, domain, h, tol, init))
        .collect::<Result<_, _>>()?;
    let mut worst = 0.0f64;
    for i in 0..sols.len() {
        for j in (i + 1)..sols.len() {
            let mut dist = 0.0f64;
            for (k, (&a, &b)) in sols[i].v.iter().zip(sols[j].v.iter()).enumerate() {
                if sols[i].interior[k] {
                    dist = dist.max((a - b).abs());
                }
            }
            worst = worst.max(dist);
        }
    }
    Ok((worst, sols))
}

/// Grid-backed value provider for the pathwise estimators. Interior points
/// use interpolated derivatives; points within the interpolation margin of
/// the boundary use the terminal payoff plus a one-sided quadratic extension
/// along the inward normal.
pub struct OracleProvider {
    pub solution: GridSolution,
    pub domain: Domain,
    pub problem: ControlProblem,
}

impl OracleProvider {
    pub fn new(solution: GridSolution, domain: Domain, problem: ControlProblem) -> Self {
        OracleProvider {
            solution,
            domain,
            problem,
        }
    }

    fn normal_extension(&self, x: &VecF) -> Result<(f64, VecF, MatF), EstimatorError> {
        let b = self
            .domain
            .project_to_boundary(x, 1e-9)
            .map_err(|e| EstimatorError::Provider(e.to_string()))?;
        let n = self.domain.inward_normal(&b);
        let h = self.solution.h;
        let g0 = self.problem.terminal(&b);
        let v1 = interpolate(&self.solution, &(&b + &n * (2.0 * h)))
            .map_err(|e| EstimatorError::Provider(e.to_string()))?;
        let v2 = interpolate(&self.solution, &(&b + &n * (4.0 * h)))
            .map_err(|e| EstimatorError::Provider(e.to_string()))?;
        // Quadratic through (0, g0), (2h, v1), (4h, v2).
        let d1 = (-3.0 * g0 + 4.0 * v1 - v2) / (4.0 * h);
        let d2 = (g0 - 2.0 * v1 + v2) / (4.0 * h * h);
        let s = (x - &b).dot(&n);
        let val = g0 + d1 * s + 0.5 * d2 * s * s;
        let gg = self.problem.terminal_grad(&b);
        let tangential = &gg - &n * gg.dot(&n);
        let grad = &tangential + &n * (d1 + d2 * s);
        let d = x.len();
        let mut hess = MatF::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                hess[(i, j)] = d2 * n[i] * n[j];
            }
        }
        let gh = self.problem.terminal_hess(&b);
        let proj = MatF::identity(d, d) - &n * n.transpose();
        hess += &proj * gh * &proj;
        Ok((val, grad, hess))
    }
}

impl ValueProvider for OracleProvider {
    fn value(&self, x: &VecF) -> Result<f64, EstimatorError> {
        match interpolate(&self.solution, x) {
            Ok(v) => Ok(v),
            Err(_) => self.normal_extension(x).map(|(v, _, _)| v),
        }
    }
    fn gradient(&self, x: &VecF) -> Result<VecF, EstimatorError> {
        let d = x.len();
        let mut grad = VecF::zeros(d);
        let mut ok = true;
        for axis in 0..d {
            let mut e = VecF::zeros(d);
            e[axis] = 1.0;
            match oracle_derivatives(&self.solution, x, &e) {
                Ok((_, d1, _)) => grad[axis] = d1,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            Ok(grad)
        } else {
            self.normal_extension(x).map(|(_, g, _)| g)
        }
    }
    fn hessian(&self, x: &VecF) -> Result<MatF, EstimatorError> {
        let d = x.len();
        let mut hess = MatF::zeros(d, d);
        let mut ok = true;
        'outer: for i in 0..d {
            for j in i..d {
                if i == j {
                    let mut dir = VecF::zeros(d);
                    dir[i] = 1.0;
                    match oracle_derivatives(&self.solution, x, &dir) {
                        Ok((_, _, d2)) => hess[(i, i)] = d2,
                        Err(_) => {
                            ok = false;
                            break 'outer;
                        }
                    }
                } else {
                    // Polarization on the diagonal directions.
                    let mut dir = VecF::zeros(d);
                    dir[i] = 1.0;
                    dir[j] = 1.0;
                    let plus = oracle_derivatives(&self.solution, x, &dir);
                    let mut dir2 = VecF::zeros(d);
                    dir2[i] = 1.0;
                    dir2[j] = -1.0;
                    let minus = oracle_derivatives(&self.solution, x, &dir2);
                    match (plus, minus) {
                        (Ok((_, _, p)), Ok((_, _, m))) => {
                            let mixed = (p - m) / 4.0;
                            hess[(i, j)] = mixed;
                            hess[(j, i)] = mixed;
                        }
                        _ => {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
        }
        if ok {
            Ok(hess)
        } else {
            self.normal_extension(x).map(|(_, _, h)| h)
        }
    }
}
