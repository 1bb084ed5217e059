//! Directional nondegeneracy functionals of the controlled diffusion.
//!
//! `mu(x, xi) = inf over {zeta : (xi, zeta) = 1} of max_alpha (a^alpha zeta, zeta)`
//! measures whether the second derivative along `xi` is actually present in
//! the Bellman operator at `x`; `mu_min(x)` is the same infimum over unit
//! vectors. Both are computed by convex minimization of a pointwise maximum
//! of positive-semidefinite quadratics: a closed form when there is a single
//! control, projected subgradient descent with multistarts plus cyclic
//! coordinate ternary refinement otherwise.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::problem::ControlProblem;
use crate::{MatF, VecF};

/// Orthonormal basis of the orthogonal complement of `xi` (d-1 columns).
fn orthogonal_basis(xi: &VecF) -> MatF {
    let d = xi.len();
    let mut cols: Vec<VecF> = Vec::with_capacity(d - 1);
    let unit = xi / xi.norm();
    // Gram-Schmidt against xi and previously accepted columns.
    for i in 0..d {
        if cols.len() == d - 1 {
            break;
        }
        let mut e = VecF::zeros(d);
        e[i] = 1.0;
        let mut v = e.clone();
        v -= &unit * unit.dot(&e);
        for c in &cols {
            v -= c * c.dot(&e);
        }
        let n = v.norm();
        if n > 1e-10 {
            cols.push(v / n);
        }
    }
    let mut basis = DMatrix::zeros(d, d - 1);
    for (j, c) in cols.iter().enumerate() {
        basis.set_column(j, c);
    }
    basis
}

fn quad_value(mats: &[MatF], zeta: &VecF) -> f64 {
    mats.iter()
        .map(|a| (a * zeta).dot(zeta))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `mu(x, xi)`: infimum of the worst-case quadratic form over the affine
/// slice `(xi, zeta) = 1`. Always nonnegative; zero exactly when every
/// control is degenerate along `xi`.
pub fn mu(problem: &ControlProblem, x: &VecF, xi: &VecF) -> f64 {
    assert!(xi.norm() > 0.0, "direction must be nonzero");
    let mats: Vec<MatF> = (0..problem.n_controls())
        .map(|alpha| problem.a(alpha, x))
        .collect();
    mu_of_matrices(&mats, xi)
}

/// Same functional with the diffusion matrices supplied directly.
pub fn mu_of_matrices(mats: &[MatF], xi: &VecF) -> f64 {
    let d = xi.len();
    let zeta0 = xi / xi.norm_squared();
    if d == 1 {
        return quad_value(mats, &zeta0).max(0.0);
    }
    let basis = orthogonal_basis(xi);
    if mats.len() == 1 {
        return single_control_min(&mats[0], &zeta0, &basis);
    }
    // Multistart projected subgradient, then cyclic coordinate ternary
    // refinement on the convex max-of-quadratics.
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d75);
    let k = d - 1;
    let objective = |w: &VecF| -> f64 {
        let zeta = &zeta0 + &basis * w;
        quad_value(mats, &zeta)
    };
    let mut best = f64::INFINITY;
    for start in 0..20 {
        let mut w = if start == 0 {
            VecF::zeros(k)
        } else {
            VecF::from_fn(k, |_, _| rng.gen_range(-2.0..2.0))
        };
        // Subgradient phase: gradient of the active quadratic.
        let mut step = 0.5;
        let mut cur = objective(&w);
        for _ in 0..400 {
            let zeta = &zeta0 + &basis * &w;
            let (mut gi, mut gv) = (0, f64::NEG_INFINITY);
            for (i, a) in mats.iter().enumerate() {
                let v = (a * &zeta).dot(&zeta);
                if v > gv {
                    gv = v;
                    gi = i;
                }
            }
            let grad_full = (&mats[gi] + mats[gi].transpose()) * &zeta;
            let grad = basis.transpose() * grad_full;
            let gn = grad.norm();
            if gn < 1e-14 {
                break;
            }
            let cand = &w - &grad * (step / gn);
            let cv = objective(&cand);
            if cv < cur {
                w = cand;
                cur = cv;
            } else {
                step *= 0.5;
                if step < 1e-12 {
                    break;
                }
            }
        }
        // Coordinate ternary refinement to tight relative accuracy.
        let mut span = 1.0f64;
        for _ in 0..200 {
            let mut improved = false;
            for j in 0..k {
                let (lo, hi) = (w[j] - span, w[j] + span);
                let (mut lo, mut hi) = (lo, hi);
                for _ in 0..120 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    let mut w1 = w.clone();
                    w1[j] = m1;
                    let mut w2 = w.clone();
                    w2[j] = m2;
                    if objective(&w1) < objective(&w2) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                let mid = 0.5 * (lo + hi);
                let mut wc = w.clone();
                wc[j] = mid;
                let cv = objective(&wc);
                if cv < cur - 1e-15 * cur.abs().max(1.0) {
                    cur = cv;
                    w = wc;
                    improved = true;
                }
            }
            span *= 0.5;
            if !improved && span < 1e-10 {
                break;
            }
        }
        best = best.min(cur);
    }
    best.max(0.0)
}

/// Exact minimum of a single PSD quadratic over the affine slice, via the
/// pseudo-inverse of the reduced Hessian. The reduced linear term has no
/// component in the Hessian null space because the quadratic is bounded
/// below by zero.
fn single_control_min(a: &MatF, zeta0: &VecF, basis: &MatF) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let h = basis.transpose() * &sym * basis; // reduced Hessian (PSD)
    let g = basis.transpose() * (&sym * zeta0); // reduced linear term
    let k = h.nrows();
    let eig = h.clone().symmetric_eigen();
    let mut w = VecF::zeros(k);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = 1e-12 * max_eig.max(1e-12);
    for i in 0..k {
        let lam = eig.eigenvalues[i];
        if lam > cutoff {
            let v = eig.eigenvectors.column(i);
            let coef = v.dot(&g) / lam;
            w -= VecF::from_iterator(k, v.iter().map(|e| e * coef));
        }
    }
    let zeta = zeta0 + basis * w;
    ((&sym * &zeta).dot(&zeta)).max(0.0)
}

/// `mu_min(x)`: infimum over unit `zeta` of the worst-case quadratic form.
/// Smallest eigenvalue when a single control is present; multistart
/// minimization over the sphere otherwise.
pub fn mu_min(problem: &ControlProblem, x: &VecF) -> f64 {
    let mats: Vec<MatF> = (0..problem.n_controls())
        .map(|alpha| problem.a(alpha, x))
        .collect();
    mu_min_of_matrices(&mats)
}

pub fn mu_min_of_matrices(mats: &[MatF]) -> f64 {
    let d = mats[0].nrows();
    if mats.len() == 1 {
        let sym = (&mats[0] + mats[0].transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        return eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
    }
    let objective = |zeta: &VecF| quad_value(mats, zeta);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d696e);
    let mut best = f64::INFINITY;
    for start in 0..40 {
        let mut z = if start < d {
            let mut e = VecF::zeros(d);
            e[start] = 1.0;
            e
        } else {
            let v = VecF::from_fn(d, |_, _| {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                u
            });
            let n = v.norm();
            &v / n
        };
        let mut cur = objective(&z);
        let mut step = 0.5;
        for _ in 0..600 {
            let (mut gi, mut gv) = (0, f64::NEG_INFINITY);
            for (i, a) in mats.iter().enumerate() {
                let v = (a * &z).dot(&z);
                if v > gv {
                    gv = v;
                    gi = i;
                }
            }
            let grad = (&mats[gi] + mats[gi].transpose()) * &z;
            // Project the subgradient onto the tangent space of the sphere.
            let tang = &grad - &z * grad.dot(&z);
            let gn = tang.norm();
            if gn < 1e-14 {
                break;
            }
            let cand_raw = &z - &tang * (step / gn);
            let cand = &cand_raw / cand_raw.norm();
            let cv = objective(&cand);
            if cv < cur {
                z = cand;
                cur = cv;
            } else {
                step *= 0.7;
                if step < 1e-13 {
                    break;
                }
            }
        }
        best = best.min(cur);
    }
    best.max(0.0)
}

/// Brute-force lattice oracle for `mu`: scans `zeta = zeta0 + sum w_j u_j`
/// over a refining grid, expanding the scan radius while the minimizer sits
/// near the edge (nearly degenerate directions push it far out). Test-only
/// accuracy; used to freeze expected values.
pub fn mu_bruteforce(mats: &[MatF], xi: &VecF, radius: f64, refinements: usize) -> f64 {
    let d = xi.len();
    let zeta0 = xi / xi.norm_squared();
    if d == 1 {
        return quad_value(mats, &zeta0).max(0.0);
    }
    let basis = orthogonal_basis(xi);
    let k = d - 1;
    // Expand until the coarse minimizer is interior to the scan box.
    let mut radius = radius;
    for _ in 0..8 {
        let steps = 24usize;
        let mut best_w = VecF::zeros(k);
        let mut best_v = f64::INFINITY;
        let mut idx = vec![0usize; k];
        loop {
            let mut w = VecF::zeros(k);
            for j in 0..k {
                w[j] = radius * (2.0 * idx[j] as f64 / steps as f64 - 1.0);
            }
            let zeta = &zeta0 + &basis * &w;
            let v = quad_value(mats, &zeta);
            if v < best_v {
                best_v = v;
                best_w = w.clone();
            }
            let mut j = 0;
            loop {
                if j == k {
                    break;
                }
                idx[j] += 1;
                if idx[j] <= steps {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == k {
                break;
            }
        }
        if best_w.amax() <= 0.8 * radius {
            break;
        }
        radius *= 4.0;
    }
    let mut center = VecF::zeros(k);
    let mut span = radius;
    let mut best = f64::INFINITY;
    for _ in 0..refinements {
        let steps = 24usize;
        let mut best_w = center.clone();
        // Tensor scan over the (d-1)-dimensional cube (d <= 3 in practice).
        let mut idx = vec![0usize; k];
        loop {
            let mut w = center.clone();
            for j in 0..k {
                w[j] += span * (2.0 * idx[j] as f64 / steps as f64 - 1.0);
            }
            let zeta = &zeta0 + &basis * &w;
            let v = quad_value(mats, &zeta);
            if v < best {
                best = v;
                best_w = w.clone();
            }
            // Increment the mixed-radix counter.
            let mut j = 0;
            loop {
                if j == k {
                    break;
                }
                idx[j] += 1;
                if idx[j] <= steps {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == k {
                break;
            }
        }
        center = best_w;
        span *= 2.5 / steps as f64;
    }
    best.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn vx(v: &[f64]) -> VecF {
        VecF::from_column_slice(v)
    }

    fn ones_matrix() -> MatF {
        dmatrix![1.0, 1.0; 1.0, 1.0]
    }

    #[test]
    fn present_direction_of_the_degenerate_operator() {
        let mats = vec![ones_matrix()];
        let m = mu_of_matrices(&mats, &vx(&[1.0, 1.0]));
        assert_relative_eq!(m, 1.0, epsilon = 1e-9);
        let bf = mu_bruteforce(&mats, &vx(&[1.0, 1.0]), 5.0, 6);
        assert_relative_eq!(m, bf, epsilon = 1e-6);
    }

    #[test]
    fn absent_direction_of_the_degenerate_operator() {
        let mats = vec![ones_matrix()];
        let m = mu_of_matrices(&mats, &vx(&[1.0, -1.0]));
        assert!(m.abs() <= 1e-9);
    }

    #[test]
    fn identity_diffusion_scales_inverse_square() {
        let mats = vec![DMatrix::identity(2, 2)];
        for xi in [vx(&[1.0, 0.0]), vx(&[0.4, -0.3]), vx(&[2.0, 1.0])] {
            let m = mu_of_matrices(&mats, &xi);
            assert_relative_eq!(m, 1.0 / xi.norm_squared(), epsilon = 1e-9);
            let bf = mu_bruteforce(&mats, &xi, 5.0, 6);
            assert_relative_eq!(m, bf, epsilon = 1e-6);
        }
    }

    #[test]
    fn scaling_law() {
        let mats = vec![ones_matrix(), dmatrix![2.0, 0.3; 0.3, 1.0]];
        let xi = vx(&[0.8, 0.6]);
        let m1 = mu_of_matrices(&mats, &xi);
        for c in [2.0, 0.5, 3.7] {
            let mc = mu_of_matrices(&mats, &(&xi * c));
            assert_relative_eq!(mc, m1 / (c * c), epsilon = 1e-7 * m1.max(1.0));
        }
    }

    #[test]
    fn multi_control_matches_bruteforce() {
        let mats = vec![
            dmatrix![1.0, 0.0; 0.0, 0.0],
            dmatrix![0.0, 0.0; 0.0, 1.0],
        ];
        for xi in [vx(&[1.0, 0.0]), vx(&[1.0, 1.0]), vx(&[0.3, -0.9])] {
            let m = mu_of_matrices(&mats, &xi);
            let bf = mu_bruteforce(&mats, &xi, 6.0, 7);
            assert_relative_eq!(m, bf, epsilon = 2e-5, max_relative = 2e-4);
        }
    }

    #[test]
    fn mu_min_eigen_and_axis_pair() {
        let mats = vec![ones_matrix()];
        assert_relative_eq!(mu_min_of_matrices(&mats), 0.0, epsilon = 1e-12);
        let mats = vec![DMatrix::identity(2, 2)];
        assert_relative_eq!(mu_min_of_matrices(&mats), 1.0, epsilon = 1e-12);
        // max(z1^2, z2^2) minimized at the diagonal: 1/2.
        let mats = vec![
            dmatrix![1.0, 0.0; 0.0, 0.0],
            dmatrix![0.0, 0.0; 0.0, 1.0],
        ];
        assert_relative_eq!(mu_min_of_matrices(&mats), 0.5, epsilon = 1e-7);
    }

    #[test]
    fn mu_min_consistent_with_directional_infimum() {
        let mats = vec![
            dmatrix![1.5, 0.2; 0.2, 0.4],
            dmatrix![0.3, -0.1; -0.1, 1.1],
        ];
        let mm = mu_min_of_matrices(&mats);
        let f = |th: f64| {
            let xi = vx(&[th.cos(), th.sin()]);
            mu_of_matrices(&mats, &xi)
        };
        // Coarse scan followed by ternary refinement of the best angle.
        let mut best_th = 0.0;
        let mut inf_dir = f64::INFINITY;
        for k in 0..64 {
            let th = std::f64::consts::PI * k as f64 / 64.0;
            let v = f(th);
            if v < inf_dir {
                inf_dir = v;
                best_th = th;
            }
        }
        let (mut lo, mut hi) = (
            best_th - std::f64::consts::PI / 64.0,
            best_th + std::f64::consts::PI / 64.0,
        );
        for _ in 0..100 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        inf_dir = inf_dir.min(f(0.5 * (lo + hi)));
        assert_relative_eq!(mm, inf_dir, epsilon = 1e-7, max_relative = 1e-6);
    }

    #[test]
    fn mu_min_lower_bounds_mu_on_directions() {
        let problem = builtins::paper_example_exa();
        let x = vx(&[0.1, 0.2]);
        let mm = mu_min(&problem, &x);
        for xi in [vx(&[1.0, 1.0]), vx(&[1.0, 0.0]), vx(&[0.5, -0.5])] {
            let m = mu(&problem, &x, &xi);
            assert!(mm <= m * xi.norm_squared() + 1e-7);
        }
    }
}
