//! Bounded smooth domains represented through a defining level function.
//!
//! A domain `D` is the set `{psi > 0}` of a smooth scalar function that
//! vanishes on the boundary with gradient norm at least one there, and is
//! rescaled (`normalize`) so that the controlled generator applied to it is
//! at most -1 everywhere inside. The level function doubles as a
//! distance-like depth coordinate; all boundary-layer bookkeeping (collar,
//! boundary layer, overlap band, interior) is expressed through its value.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::ControlProblem;
use crate::{MatF, VecF};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point lies outside the domain bounding box")]
    OutsideBoundingBox,
    #[error("level function or its derivatives are not finite at the queried point")]
    NonFinite,
    #[error("level ordering violated: need 0 < delta < lambda^2 < lambda < 1, got delta={delta}, lambda={lambda}")]
    InvalidLevels { delta: f64, lambda: f64 },
    #[error("normalization impossible: sup_alpha L^alpha psi = {value} >= 0 at x={point:?} under control {control}")]
    NormalizationImpossible {
        point: Vec<f64>,
        control: usize,
        value: f64,
    },
    #[error("boundary projection failed to converge from the sampled start point")]
    ProjectionFailed,
}

type PsiFn = dyn Fn(&VecF) -> f64 + Send + Sync;
type GradFn = dyn Fn(&VecF) -> VecF + Send + Sync;
type HessFn = dyn Fn(&VecF) -> MatF + Send + Sync;
type ThirdFn = dyn Fn(&VecF) -> Vec<MatF> + Send + Sync;

/// Smooth bounded domain `{psi > 0}` with analytic derivatives of the level
/// function up to second (optionally third) order.
///
/// Immutable after construction; shareable across workers.
#[derive(Clone)]
pub struct Domain {
    pub dim: usize,
    psi: Arc<PsiFn>,
    grad: Arc<GradFn>,
    hess: Arc<HessFn>,
    /// Third derivatives `psi_{x^i x^j x^k}` as `d` matrices indexed by `k`.
    /// Optional; no recipe consumes them, they are exposed for completeness.
    third: Option<Arc<ThirdFn>>,
    pub bounding_box: (VecF, VecF),
    /// Cumulative rescale applied by [`Domain::normalize`].
    pub scale: f64,
    pub label: String,
}

impl std::fmt::Debug for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Domain")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("scale", &self.scale)
            .finish()
    }
}

impl Domain {
    pub fn from_parts(
        dim: usize,
        psi: Arc<PsiFn>,
        grad: Arc<GradFn>,
        hess: Arc<HessFn>,
        third: Option<Arc<ThirdFn>>,
        bounding_box: (VecF, VecF),
        label: impl Into<String>,
    ) -> Self {
        Domain {
            dim,
            psi,
            grad,
            hess,
            third,
            bounding_box,
            scale: 1.0,
            label: label.into(),
        }
    }

    /// Ball of given radius: `psi = (R^2 - |x-c|^2)/R`, so the boundary
    /// gradient norm is `2R/R = 2`.
    pub fn ball(center: &[f64], radius: f64) -> Self {
        let d = center.len();
        let c = VecF::from_column_slice(center);
        let r = radius;
        let c1 = c.clone();
        let c2 = c.clone();
        let lo = c.map(|v| v - 1.05 * r);
        let hi = c.map(|v| v + 1.05 * r);
        Domain::from_parts(
            d,
            Arc::new(move |x: &VecF| (r * r - (x - &c1).norm_squared()) / r),
            Arc::new(move |x: &VecF| (x - &c2) * (-2.0 / r)),
            Arc::new(move |_x: &VecF| DMatrix::identity(d, d) * (-2.0 / r)),
            Some(Arc::new(move |_x: &VecF| {
                vec![DMatrix::zeros(d, d); d]
            })),
            (lo, hi),
            format!("ball(r={r})"),
        )
    }

    /// Ellipsoid with semi-axes `a_i`: `psi = s (1 - sum ((x_i-c_i)/a_i)^2)`
    /// where the prefactor keeps the boundary gradient norm at least one.
    pub fn ellipsoid(center: &[f64], semi_axes: &[f64]) -> Self {
        let d = center.len();
        assert_eq!(d, semi_axes.len());
        let c = VecF::from_column_slice(center);
        let a = VecF::from_column_slice(semi_axes);
        let amax = semi_axes.iter().cloned().fold(f64::MIN, f64::max);
        let s = (amax / 2.0).max(1.0);
        let (c1, a1) = (c.clone(), a.clone());
        let (c2, a2) = (c.clone(), a.clone());
        let a3 = a.clone();
        let lo = c.zip_map(&a, |ci, ai| ci - 1.05 * ai);
        let hi = c.zip_map(&a, |ci, ai| ci + 1.05 * ai);
        Domain::from_parts(
            d,
            Arc::new(move |x: &VecF| {
                let mut q = 0.0;
                for i in 0..d {
                    let u = (x[i] - c1[i]) / a1[i];
                    q += u * u;
                }
                s * (1.0 - q)
            }),
            Arc::new(move |x: &VecF| {
                VecF::from_fn(d, |i, _| -2.0 * s * (x[i] - c2[i]) / (a2[i] * a2[i]))
            }),
            Arc::new(move |_x: &VecF| {
                DMatrix::from_fn(d, d, |i, j| {
                    if i == j {
                        -2.0 * s / (a3[i] * a3[i])
                    } else {
                        0.0
                    }
                })
            }),
            Some(Arc::new(move |_x: &VecF| {
                vec![DMatrix::zeros(d, d); d]
            })),
            (lo, hi),
            "ellipsoid".to_string(),
        )
    }

    /// Smoothed box (quartic superellipsoid) with half-widths `a_i`:
    /// `psi = s (1 - sum ((x_i-c_i)/a_i)^4)`.
    pub fn smoothed_box(center: &[f64], half_widths: &[f64]) -> Self {
        let d = center.len();
        assert_eq!(d, half_widths.len());
        let c = VecF::from_column_slice(center);
        let a = VecF::from_column_slice(half_widths);
        // Minimum boundary gradient norm of the raw quartic is
        // 4 (sum a_i^4)^(-1/4); scale so it is at least one.
        let sum4: f64 = half_widths.iter().map(|ai| ai.powi(4)).sum();
        let s = (sum4.powf(0.25) / 4.0).max(1.0);
        let (c1, a1) = (c.clone(), a.clone());
        let (c2, a2) = (c.clone(), a.clone());
        let (c3, a3) = (c.clone(), a.clone());
        let (c4, a4) = (c.clone(), a.clone());
        let lo = c.zip_map(&a, |ci, ai| ci - 1.05 * ai);
        let hi = c.zip_map(&a, |ci, ai| ci + 1.05 * ai);
        Domain::from_parts(
            d,
            Arc::new(move |x: &VecF| {
                let mut q = 0.0;
                for i in 0..d {
                    let u = (x[i] - c1[i]) / a1[i];
                    q += u.powi(4);
                }
                s * (1.0 - q)
            }),
            Arc::new(move |x: &VecF| {
                VecF::from_fn(d, |i, _| {
                    -4.0 * s * (x[i] - c2[i]).powi(3) / a2[i].powi(4)
                })
            }),
            Arc::new(move |x: &VecF| {
                DMatrix::from_fn(d, d, |i, j| {
                    if i == j {
                        -12.0 * s * (x[i] - c3[i]).powi(2) / a3[i].powi(4)
                    } else {
                        0.0
                    }
                })
            }),
            Some(Arc::new(move |x: &VecF| {
                (0..d)
                    .map(|k| {
                        DMatrix::from_fn(d, d, |i, j| {
                            if i == j && j == k {
                                -24.0 * s * (x[i] - c4[i]) / a4[i].powi(4)
                            } else {
                                0.0
                            }
                        })
                    })
                    .collect()
            })),
            (lo, hi),
            "smoothed-box".to_string(),
        )
    }

    pub fn psi(&self, x: &VecF) -> f64 {
        (self.psi)(x)
    }

    pub fn grad(&self, x: &VecF) -> VecF {
        (self.grad)(x)
    }

    pub fn hess(&self, x: &VecF) -> MatF {
        (self.hess)(x)
    }

    pub fn third(&self, x: &VecF) -> Option<Vec<MatF>> {
        self.third.as_ref().map(|f| f(x))
    }

    pub fn contains(&self, x: &VecF) -> bool {
        self.psi(x) > 0.0
    }

    pub fn in_bounding_box(&self, x: &VecF) -> bool {
        let (lo, hi) = &self.bounding_box;
        (0..self.dim).all(|i| x[i] >= lo[i] && x[i] <= hi[i])
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = &self.bounding_box;
        (hi - lo).norm()
    }

    /// Level function with first and second derivatives at `x`.
    ///
    /// Fails when `x` is outside the bounding box or any output is not
    /// finite (an ill-formed domain).
    pub fn psi_eval(&self, x: &VecF) -> Result<(f64, VecF, MatF), GeometryError> {
        if !self.in_bounding_box(x) {
            return Err(GeometryError::OutsideBoundingBox);
        }
        let v = self.psi(x);
        let g = self.grad(x);
        let h = self.hess(x);
        if !v.is_finite() || g.iter().any(|e| !e.is_finite()) || h.iter().any(|e| !e.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok((v, g, h))
    }

    /// Unit inward normal `psi_x / |psi_x|` (valid near the boundary).
    pub fn inward_normal(&self, x: &VecF) -> VecF {
        let g = self.grad(x);
        let n = g.norm();
        g / n
    }

    /// Rescale the level function by a constant `>= 1` so that
    /// `sup_alpha L^alpha psi <= -1` on a dense interior sample. Level sets
    /// (hence all regions) are preserved; the scale factor is reported on the
    /// returned domain.
    pub fn normalize(
        &self,
        problem: &ControlProblem,
        n_samples: usize,
        seed: u64,
    ) -> Result<Domain, GeometryError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::NEG_INFINITY;
        let mut witness: Option<(VecF, usize)> = None;
        let mut drawn = 0usize;
        while drawn < n_samples {
            let x = self.sample_box(&mut rng);
            if self.psi(&x) <= 0.0 {
                continue;
            }
            drawn += 1;
            for alpha in 0..problem.n_controls() {
                let l = problem.generator_applied(alpha, &x, self);
                if l > worst {
                    worst = l;
                    witness = Some((x.clone(), alpha));
                }
            }
        }
        if worst >= 0.0 {
            let (x, alpha) = witness.expect("witness recorded with worst value");
            return Err(GeometryError::NormalizationImpossible {
                point: x.iter().cloned().collect(),
                control: alpha,
                value: worst,
            });
        }
        let scale = (1.0 / (-worst)).max(1.0);
        Ok(self.rescaled(scale))
    }

    /// Rescale psi (and all derivatives) by a constant factor.
    pub fn rescaled(&self, scale: f64) -> Domain {
        let psi = self.psi.clone();
        let grad = self.grad.clone();
        let hess = self.hess.clone();
        let third = self.third.clone();
        Domain {
            dim: self.dim,
            psi: Arc::new(move |x: &VecF| scale * psi(x)),
            grad: Arc::new(move |x: &VecF| grad(x) * scale),
            hess: Arc::new(move |x: &VecF| hess(x) * scale),
            third: third.map(|t| {
                let t = t.clone();
                Arc::new(move |x: &VecF| t(x).into_iter().map(|m| m * scale).collect())
                    as Arc<ThirdFn>
            }),
            bounding_box: self.bounding_box.clone(),
            scale: self.scale * scale,
            label: self.label.clone(),
        }
    }

    fn sample_box(&self, rng: &mut impl Rng) -> VecF {
        let (lo, hi) = &self.bounding_box;
        VecF::from_fn(self.dim, |i, _| rng.gen_range(lo[i]..hi[i]))
    }

    /// Newton projection of `x` onto the zero level set:
    /// `x <- x - psi(x) grad/|grad|^2` until `|psi| <= tol`.
    pub fn project_to_boundary(&self, x: &VecF, tol: f64) -> Result<VecF, GeometryError> {
        let mut y = x.clone();
        for _ in 0..100 {
            let v = self.psi(&y);
            if v.abs() <= tol {
                return Ok(y);
            }
            let g = self.grad(&y);
            let n2 = g.norm_squared();
            if n2 < 1e-14 || !v.is_finite() {
                return Err(GeometryError::ProjectionFailed);
            }
            y -= g * (v / n2);
        }
        if self.psi(&y).abs() <= tol {
            Ok(y)
        } else {
            Err(GeometryError::ProjectionFailed)
        }
    }

    /// Boundary points obtained by projecting the bounding-box face centers
    /// onto the zero level set; covers axis-aligned extremes exactly.
    pub fn axis_boundary_points(&self) -> Vec<VecF> {
        let (lo, hi) = &self.bounding_box;
        let center = (lo + hi) * 0.5;
        let mut out = Vec::with_capacity(2 * self.dim);
        for axis in 0..self.dim {
            for sign in [-1.0, 1.0] {
                let mut x = center.clone();
                x[axis] = if sign > 0.0 { hi[axis] } else { lo[axis] };
                if let Ok(b) = self.project_to_boundary(&x, 1e-12) {
                    out.push(b);
                }
            }
        }
        out
    }

    /// Boundary points by rejection sampling from the bounding box followed
    /// by Newton projection onto the zero level set.
    pub fn sample_boundary(&self, n: usize, seed: u64) -> Vec<VecF> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < 200 * n + 1000 {
            attempts += 1;
            let x = self.sample_box(&mut rng);
            if let Ok(b) = self.project_to_boundary(&x, 1e-12) {
                if self.in_bounding_box(&b) {
                    out.push(b);
                }
            }
        }
        out
    }

    /// Interior points by rejection sampling, optionally constrained to a
    /// band of psi values.
    pub fn sample_interior(
        &self,
        n: usize,
        seed: u64,
        psi_range: Option<(f64, f64)>,
    ) -> Vec<VecF> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < 2000 * n + 1000 {
            attempts += 1;
            let x = self.sample_box(&mut rng);
            let p = self.psi(&x);
            let ok = match psi_range {
                Some((lo, hi)) => p > lo && p < hi,
                None => p > 0.0,
            };
            if ok {
                out.push(x);
            }
        }
        out
    }

    /// Find a point on the ray from the domain "center of box" in direction
    /// `dir` with a prescribed psi value (bisection). Handy for psi-ladders.
    pub fn point_at_psi(&self, dir: &VecF, target_psi: f64) -> Option<VecF> {
        let (lo, hi) = &self.bounding_box;
        let center = (lo + hi) * 0.5;
        let u = dir / dir.norm();
        // Bracket: t=0 has psi(center) which should exceed target, expand t
        // until psi < target.
        let mut t_lo = 0.0f64;
        let mut step = 1e-3 * self.diameter();
        let psi0 = self.psi(&center);
        if psi0 <= target_psi {
            return None;
        }
        let mut t = step;
        let mut t_hi = loop {
            let x = &center + &u * t;
            if !self.in_bounding_box(&x) || self.psi(&x) < target_psi {
                break t;
            }
            t_lo = t;
            step *= 1.5;
            t += step;
        };
        for _ in 0..200 {
            let mid = 0.5 * (t_lo + t_hi);
            let x = &center + &u * mid;
            if self.psi(&x) > target_psi {
                t_lo = mid;
            } else {
                t_hi = mid;
            }
        }
        let x = &center + &u * (0.5 * (t_lo + t_hi));
        Some(x)
    }
}

/// Sub-level bookkeeping parameters: `0 < delta < lambda^2 < lambda < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub delta: f64,
    pub lambda: f64,
}

impl Levels {
    pub fn new(delta: f64, lambda: f64) -> Result<Self, GeometryError> {
        if !(0.0 < delta && delta < lambda * lambda && lambda * lambda < lambda && lambda < 1.0) {
            return Err(GeometryError::InvalidLevels { delta, lambda });
        }
        Ok(Levels { delta, lambda })
    }
}

impl Default for Levels {
    fn default() -> Self {
        Levels {
            delta: 1e-4,
            lambda: 0.25,
        }
    }
}

/// Classification of a point by its psi value against `{0, delta, lambda^2,
/// lambda}`. The five tags partition the closed domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// psi <= 0
    Outside,
    /// 0 < psi <= delta
    Collar,
    /// delta < psi <= lambda^2
    BoundaryLayer,
    /// lambda^2 < psi < lambda: both recipes are valid here
    Overlap,
    /// psi >= lambda
    Interior,
}

/// Region tag of `x` given the levels; a pure function of `psi(x)`.
pub fn region_classify(
    domain: &Domain,
    x: &VecF,
    levels: Levels,
) -> Result<Region, GeometryError> {
    // Levels were validated on construction, but re-validate to keep the
    // contract local.
    let levels = Levels::new(levels.delta, levels.lambda)?;
    Ok(region_of_psi(domain.psi(x), levels))
}

pub fn region_of_psi(psi: f64, levels: Levels) -> Region {
    let l2 = levels.lambda * levels.lambda;
    if psi <= 0.0 {
        Region::Outside
    } else if psi <= levels.delta {
        Region::Collar
    } else if psi <= l2 {
        Region::BoundaryLayer
    } else if psi < levels.lambda {
        Region::Overlap
    } else {
        Region::Interior
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vx(v: &[f64]) -> VecF {
        VecF::from_column_slice(v)
    }

    #[test]
    fn unit_ball_center_and_boundary() {
        let d = Domain::ball(&[0.0, 0.0], 1.0);
        let (p, g, h) = d.psi_eval(&vx(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(p, 1.0);
        assert_eq!(g, vx(&[0.0, 0.0]));
        assert_relative_eq!(h[(0, 0)], -2.0);
        assert_relative_eq!(h[(1, 1)], -2.0);
        assert_relative_eq!(h[(0, 1)], 0.0);

        let (p, g, _) = d.psi_eval(&vx(&[1.0, 0.0])).unwrap();
        assert_relative_eq!(p, 0.0, epsilon = 1e-14);
        assert!(g.norm() >= 1.0);
        assert_relative_eq!(g.norm(), 2.0);
    }

    #[test]
    fn unit_ball_interior_point() {
        let d = Domain::ball(&[0.0, 0.0], 1.0);
        let (p, g, _) = d.psi_eval(&vx(&[0.6, 0.0])).unwrap();
        assert_relative_eq!(p, 0.64, epsilon = 1e-14);
        assert_relative_eq!(g[0], -1.2, epsilon = 1e-14);
        assert_relative_eq!(g[1], 0.0);
    }

    #[test]
    fn outside_bounding_box_rejected() {
        let d = Domain::ball(&[0.0], 1.0);
        assert!(matches!(
            d.psi_eval(&vx(&[2.0])),
            Err(GeometryError::OutsideBoundingBox)
        ));
    }

    #[test]
    fn region_partition() {
        let d = Domain::ball(&[0.0], 1.0);
        let levels = Levels::new(0.01, 0.25).unwrap();
        // psi(x) = 1 - x^2 in 1D
        let cases = [
            (1.2, Region::Outside),   // psi = -0.44
            (0.9995, Region::Collar), // psi ~ 0.001
            (0.98, Region::BoundaryLayer), // psi ~ 0.0396
            (0.948, Region::Overlap), // psi ~ 0.1013
            (0.5, Region::Interior),  // psi = 0.75
        ];
        for (x, want) in cases {
            assert_eq!(region_classify(&d, &vx(&[x]), levels).unwrap(), want, "x={x}");
        }
    }

    #[test]
    fn region_examples_from_thresholds() {
        let levels = Levels::new(0.01, 0.25).unwrap();
        assert_eq!(region_of_psi(-0.1, levels), Region::Outside);
        assert_eq!(region_of_psi(0.1, levels), Region::Overlap); // 0.0625 < 0.1 < 0.25
        assert_eq!(region_of_psi(0.5, levels), Region::Interior);
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(Levels::new(0.2, 0.25).is_err()); // delta >= lambda^2
        assert!(Levels::new(0.0, 0.25).is_err());
        assert!(Levels::new(0.01, 1.0).is_err());
    }

    #[test]
    fn boundary_samples_on_level_set() {
        for dom in [
            Domain::ball(&[0.3, -0.2], 0.8),
            Domain::ellipsoid(&[0.0, 0.0], &[1.0, 0.5]),
            Domain::smoothed_box(&[0.0, 0.0], &[1.0, 0.7]),
        ] {
            let pts = dom.sample_boundary(1000, 42);
            assert_eq!(pts.len(), 1000, "{}", dom.label);
            for p in &pts {
                assert!(dom.psi(p).abs() <= 1e-10, "{}", dom.label);
                assert!(dom.grad(p).norm() >= 1.0, "{}", dom.label);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for dom in [
            Domain::ball(&[0.1, 0.0], 0.9),
            Domain::ellipsoid(&[0.0, 0.1], &[1.1, 0.6]),
            Domain::smoothed_box(&[0.0, 0.0], &[0.9, 0.8]),
        ] {
            let h = 1e-5 * dom.diameter();
            let pts = dom.sample_interior(50, 9, None);
            for x in pts {
                let g = dom.grad(&x);
                let hm = dom.hess(&x);
                for i in 0..dom.dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (dom.psi(&xp) - dom.psi(&xm)) / (2.0 * h);
                    let denom = g[i].abs().max(1.0);
                    assert!(
                        (fd - g[i]).abs() / denom <= 1e-6,
                        "{}: grad mismatch {fd} vs {}",
                        dom.label,
                        g[i]
                    );
                    let gp = dom.grad(&xp);
                    let gm = dom.grad(&xm);
                    for j in 0..dom.dim {
                        let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                        let denom = hm[(i, j)].abs().max(1.0);
                        assert!(
                            (fd2 - hm[(i, j)]).abs() / denom <= 1e-6,
                            "{}: hess mismatch",
                            dom.label
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_scale_and_impossibility() {
        use crate::problem::{ClosureCoefficients, ControlProblem};
        use nalgebra::DVector;
        use std::sync::Arc;
        let make = |sigma_scale: f64, drift_coef: f64| {
            let coef = ClosureCoefficients {
                sigma: Box::new(move |_a, _x| DMatrix::identity(2, 2) * sigma_scale),
                sigma_dir: Box::new(|_a, _x, _d| DMatrix::zeros(2, 2)),
                sigma_dir2: Box::new(|_a, _x, _d| DMatrix::zeros(2, 2)),
                drift: Box::new(move |_a, x: &VecF| x * drift_coef),
                drift_dir: Box::new(move |_a, _x, d: &VecF| d * drift_coef),
                drift_dir2: Box::new(|_a, _x, _d| DVector::zeros(2)),
                discount: Box::new(|_a, _x| 0.0),
                discount_dir: Box::new(|_a, _x, _d| 0.0),
                discount_dir2: Box::new(|_a, _x, _d| 0.0),
                running: Box::new(|_a, _x| 0.0),
                running_dir: Box::new(|_a, _x, _d| 0.0),
                running_dir2: Box::new(|_a, _x, _d| 0.0),
                terminal: Box::new(|_x| 0.0),
                terminal_grad: Box::new(|_x| DVector::zeros(2)),
                terminal_hess: Box::new(|_x| DMatrix::zeros(2, 2)),
            };
            ControlProblem::new("norm-test", vec!["0".into()], 2, 2, 8.0, Arc::new(coef))
        };
        let dom = Domain::ball(&[0.0, 0.0], 1.0);
        // a = I: L psi0 = -2d = -4, no rescale needed.
        let p_iso = make(2.0f64.sqrt(), 0.0);
        let n = dom.normalize(&p_iso, 2000, 4).unwrap();
        assert_relative_eq!(n.scale, 1.0, epsilon = 1e-12);
        // a = I/8 in d = 2: L psi0 = -0.5, so the scale is 2.
        let p_eighth = make(0.5, 0.0);
        let n = dom.normalize(&p_eighth, 2000, 4).unwrap();
        assert_relative_eq!(n.scale, 2.0, epsilon = 1e-9);
        assert!(n.psi(&vx(&[0.0, 0.0])) > 1.9);
        // Strong drift toward the center turns L psi positive somewhere,
        // which makes normalization impossible; the witness is reported.
        let p_drift = make(2.0f64.sqrt(), -10.0);
        match dom.normalize(&p_drift, 4000, 4) {
            Err(GeometryError::NormalizationImpossible { value, .. }) => {
                assert!(value > 0.0);
            }
            other => panic!("expected impossibility, got {other:?}"),
        }
    }

    #[test]
    fn normalized_generator_bound_holds_on_sample() {
        // After normalization the sampled generator stays at or below -1.
        use crate::problem::{ClosureCoefficients, ControlProblem};
        use nalgebra::DVector;
        use std::sync::Arc;
        let coef = ClosureCoefficients {
            sigma: Box::new(|_a, _x| DMatrix::identity(2, 2) * 0.5),
            sigma_dir: Box::new(|_a, _x, _d| DMatrix::zeros(2, 2)),
            sigma_dir2: Box::new(|_a, _x, _d| DMatrix::zeros(2, 2)),
            drift: Box::new(|_a, _x| DVector::zeros(2)),
            drift_dir: Box::new(|_a, _x, _d| DVector::zeros(2)),
            drift_dir2: Box::new(|_a, _x, _d| DVector::zeros(2)),
            discount: Box::new(|_a, _x| 0.0),
            discount_dir: Box::new(|_a, _x, _d| 0.0),
            discount_dir2: Box::new(|_a, _x, _d| 0.0),
            running: Box::new(|_a, _x| 0.0),
            running_dir: Box::new(|_a, _x, _d| 0.0),
            running_dir2: Box::new(|_a, _x, _d| 0.0),
            terminal: Box::new(|_x| 0.0),
            terminal_grad: Box::new(|_x| DVector::zeros(2)),
            terminal_hess: Box::new(|_x| DMatrix::zeros(2, 2)),
        };
        let p = ControlProblem::new("norm-check", vec!["0".into()], 2, 2, 8.0, Arc::new(coef));
        let dom = Domain::ball(&[0.0, 0.0], 1.0).normalize(&p, 10_000, 8).unwrap();
        let pts = dom.sample_interior(10_000, 17, None);
        let mut worst = f64::NEG_INFINITY;
        for x in &pts {
            worst = worst.max(p.generator_applied(0, x, &dom));
        }
        assert!(worst <= -1.0 + 1e-9, "sup L psi = {worst}");
    }

    #[test]
    fn hessian_symmetric() {
        let dom = Domain::smoothed_box(&[0.0, 0.0], &[1.0, 0.5]);
        for x in dom.sample_interior(100, 3, None) {
            let h = dom.hess(&x);
            let defect = (h.clone() - h.transpose()).amax();
            assert!(defect <= 1e-12);
        }
    }
}
