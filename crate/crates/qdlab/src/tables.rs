//! Coefficient tables on rectilinear grids with local quadratic
//! interpolation, the config-file alternative to built-in problems.
//!
//! Each scalar field is stored nodewise (axis 0 fastest); evaluation picks
//! the 3-node window nearest the query per axis and differentiates the
//! tensor Lagrange quadratic analytically. The interpolant is C^0 with
//! piecewise-smooth derivatives, which is adequate for config-driven
//! experimentation; analytic benchmarks remain the reference for derivative
//! fidelity.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::problem::{CoefficientSet, ControlProblem};
use crate::{MatF, VecF};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// JSON shape of a tabulated problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub d: usize,
    pub d1: usize,
    pub k0: f64,
    pub controls: Vec<String>,
    pub axes: Vec<AxisSpec>,
    /// `sigma[control][node]` flattened row-major `d x d1` entries.
    pub sigma: Vec<Vec<Vec<f64>>>,
    /// `drift[control][node]` of length `d`.
    pub drift: Vec<Vec<Vec<f64>>>,
    /// `discount[control][node]`.
    pub discount: Vec<Vec<f64>>,
    /// `running[control][node]`.
    pub running: Vec<Vec<f64>>,
    /// `terminal[node]`.
    pub terminal: Vec<f64>,
}

impl TableSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=2).contains(&self.d) {
            return Err("table.d: must be 1 or 2".into());
        }
        if self.axes.len() != self.d {
            return Err("table.axes: length must equal d".into());
        }
        for (i, ax) in self.axes.iter().enumerate() {
            if ax.n < 3 {
                return Err(format!("table.axes[{i}].n: need at least 3 nodes"));
            }
            if !(ax.max > ax.min) {
                return Err(format!("table.axes[{i}]: max must exceed min"));
            }
        }
        let nodes: usize = self.axes.iter().map(|a| a.n).product();
        let nc = self.controls.len();
        if nc == 0 {
            return Err("table.controls: must be nonempty".into());
        }
        if self.k0 < 1.0 {
            return Err("table.k0: must be at least 1".into());
        }
        let check_outer = |name: &str, len: usize| -> Result<(), String> {
            if len != nc {
                Err(format!("table.{name}: outer length must equal controls"))
            } else {
                Ok(())
            }
        };
        check_outer("sigma", self.sigma.len())?;
        check_outer("drift", self.drift.len())?;
        check_outer("discount", self.discount.len())?;
        check_outer("running", self.running.len())?;
        for a in 0..nc {
            if self.sigma[a].len() != nodes {
                return Err(format!("table.sigma[{a}]: need {nodes} node entries"));
            }
            for (ni, entry) in self.sigma[a].iter().enumerate() {
                if entry.len() != self.d * self.d1 {
                    return Err(format!(
                        "table.sigma[{a}][{ni}]: need d*d1 = {} entries",
                        self.d * self.d1
                    ));
                }
            }
            if self.drift[a].len() != nodes {
                return Err(format!("table.drift[{a}]: need {nodes} node entries"));
            }
            for (ni, entry) in self.drift[a].iter().enumerate() {
                if entry.len() != self.d {
                    return Err(format!("table.drift[{a}][{ni}]: need d = {} entries", self.d));
                }
            }
            if self.discount[a].len() != nodes {
                return Err(format!("table.discount[{a}]: need {nodes} node entries"));
            }
            if self.running[a].len() != nodes {
                return Err(format!("table.running[{a}]: need {nodes} node entries"));
            }
        }
        if self.terminal.len() != nodes {
            return Err(format!("table.terminal: need {nodes} node entries"));
        }
        Ok(())
    }

    pub fn into_problem(self, name: impl Into<String>) -> Result<ControlProblem, String> {
        self.validate()?;
        let d = self.d;
        let d1 = self.d1;
        let k0 = self.k0;
        let controls = self.controls.clone();
        let coef = TabulatedCoefficients::new(self)?;
        Ok(ControlProblem::new(name, controls, d, d1, k0, Arc::new(coef)))
    }
}

/// Scalar field on the grid.
#[derive(Debug, Clone)]
struct Field {
    axes: Vec<AxisSpec>,
    values: Vec<f64>,
}

impl Field {
    fn step(&self, axis: usize) -> f64 {
        (self.axes[axis].max - self.axes[axis].min) / (self.axes[axis].n - 1) as f64
    }

    /// Per-axis window base (center node of the 3-window) and the local
    /// coordinate in window units.
    fn window(&self, axis: usize, x: f64) -> (usize, f64) {
        let h = self.step(axis);
        let t = (x - self.axes[axis].min) / h;
        let c = (t.round() as isize).clamp(1, self.axes[axis].n as isize - 2) as usize;
        (c, t - c as f64)
    }

    fn flat(&self, m: &[usize]) -> usize {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for (axis, &mi) in m.iter().enumerate() {
            idx += mi * stride;
            stride *= self.axes[axis].n;
        }
        idx
    }

    /// Value, gradient and Hessian of the local tensor quadratic.
    fn eval(&self, x: &VecF) -> (f64, VecF, MatF) {
        let d = self.axes.len();
        let mut base = vec![0usize; d];
        let mut w = vec![[0.0f64; 3]; d];
        let mut dw = vec![[0.0f64; 3]; d];
        let mut ddw = vec![[0.0f64; 3]; d];
        for axis in 0..d {
            let (c, s) = self.window(axis, x[axis]);
            base[axis] = c;
            let h = self.step(axis);
            w[axis] = [0.5 * s * (s - 1.0), 1.0 - s * s, 0.5 * s * (s + 1.0)];
            dw[axis] = [(s - 0.5) / h, -2.0 * s / h, (s + 0.5) / h];
            ddw[axis] = [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)];
        }
        let mut val = 0.0f64;
        let mut grad = VecF::zeros(d);
        let mut hess = MatF::zeros(d, d);
        match d {
            1 => {
                for (k, dk) in [-1isize, 0, 1].iter().enumerate() {
                    let idx = self.flat(&[(base[0] as isize + dk) as usize]);
                    let v = self.values[idx];
                    val += w[0][k] * v;
                    grad[0] += dw[0][k] * v;
                    hess[(0, 0)] += ddw[0][k] * v;
                }
            }
            2 => {
                for (k0, d0) in [-1isize, 0, 1].iter().enumerate() {
                    for (k1, d1o) in [-1isize, 0, 1].iter().enumerate() {
                        let idx = self.flat(&[
                            (base[0] as isize + d0) as usize,
                            (base[1] as isize + d1o) as usize,
                        ]);
                        let v = self.values[idx];
                        val += w[0][k0] * w[1][k1] * v;
                        grad[0] += dw[0][k0] * w[1][k1] * v;
                        grad[1] += w[0][k0] * dw[1][k1] * v;
                        hess[(0, 0)] += ddw[0][k0] * w[1][k1] * v;
                        hess[(1, 1)] += w[0][k0] * ddw[1][k1] * v;
                        let mixed = dw[0][k0] * dw[1][k1] * v;
                        hess[(0, 1)] += mixed;
                    }
                }
                hess[(1, 0)] = hess[(0, 1)];
            }
            _ => unreachable!("validated d <= 2"),
        }
        (val, grad, hess)
    }
}

/// Coefficient set backed by per-entry interpolated fields.
pub struct TabulatedCoefficients {
    d: usize,
    d1: usize,
    sigma_fields: Vec<Vec<Field>>, // [control][entry d*d1]
    drift_fields: Vec<Vec<Field>>, // [control][entry d]
    discount_fields: Vec<Field>,
    running_fields: Vec<Field>,
    terminal_field: Field,
}

impl TabulatedCoefficients {
    pub fn new(spec: TableSpec) -> Result<Self, String> {
        spec.validate()?;
        let nodes: usize = spec.axes.iter().map(|a| a.n).product();
        let make_field = |values: Vec<f64>| Field {
            axes: spec.axes.clone(),
            values,
        };
        let nc = spec.controls.len();
        let mut sigma_fields = Vec::with_capacity(nc);
        let mut drift_fields = Vec::with_capacity(nc);
        for a in 0..nc {
            let mut entries = Vec::with_capacity(spec.d * spec.d1);
            for e in 0..spec.d * spec.d1 {
                let vals: Vec<f64> = (0..nodes).map(|ni| spec.sigma[a][ni][e]).collect();
                entries.push(make_field(vals));
            }
            sigma_fields.push(entries);
            let mut dentries = Vec::with_capacity(spec.d);
            for e in 0..spec.d {
                let vals: Vec<f64> = (0..nodes).map(|ni| spec.drift[a][ni][e]).collect();
                dentries.push(make_field(vals));
            }
            drift_fields.push(dentries);
        }
        let discount_fields: Vec<Field> = (0..nc)
            .map(|a| make_field(spec.discount[a].clone()))
            .collect();
        let running_fields: Vec<Field> = (0..nc)
            .map(|a| make_field(spec.running[a].clone()))
            .collect();
        let terminal_field = make_field(spec.terminal.clone());
        Ok(TabulatedCoefficients {
            d: spec.d,
            d1: spec.d1,
            sigma_fields,
            drift_fields,
            discount_fields,
            running_fields,
            terminal_field,
        })
    }

    fn sigma_entry(&self, alpha: usize, i: usize, k: usize) -> &Field {
        // Row-major d x d1.
        &self.sigma_fields[alpha][i * self.d1 + k]
    }
}

impl CoefficientSet for TabulatedCoefficients {
    fn sigma(&self, alpha: usize, x: &VecF) -> MatF {
        MatF::from_fn(self.d, self.d1, |i, k| {
            self.sigma_entry(alpha, i, k).eval(x).0
        })
    }
    fn sigma_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        MatF::from_fn(self.d, self.d1, |i, k| {
            self.sigma_entry(alpha, i, k).eval(x).1.dot(dir)
        })
    }
    fn sigma_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> MatF {
        MatF::from_fn(self.d, self.d1, |i, k| {
            let (_, _, h) = self.sigma_entry(alpha, i, k).eval(x);
            (&h * dir).dot(dir)
        })
    }
    fn drift(&self, alpha: usize, x: &VecF) -> VecF {
        VecF::from_fn(self.d, |i, _| self.drift_fields[alpha][i].eval(x).0)
    }
    fn drift_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        VecF::from_fn(self.d, |i, _| self.drift_fields[alpha][i].eval(x).1.dot(dir))
    }
    fn drift_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> VecF {
        VecF::from_fn(self.d, |i, _| {
            let (_, _, h) = self.drift_fields[alpha][i].eval(x);
            (&h * dir).dot(dir)
        })
    }
    fn discount(&self, alpha: usize, x: &VecF) -> f64 {
        self.discount_fields[alpha].eval(x).0
    }
    fn discount_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.discount_fields[alpha].eval(x).1.dot(dir)
    }
    fn discount_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        let (_, _, h) = self.discount_fields[alpha].eval(x);
        (&h * dir).dot(dir)
    }
    fn running(&self, alpha: usize, x: &VecF) -> f64 {
        self.running_fields[alpha].eval(x).0
    }
    fn running_dir(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        self.running_fields[alpha].eval(x).1.dot(dir)
    }
    fn running_dir2(&self, alpha: usize, x: &VecF, dir: &VecF) -> f64 {
        let (_, _, h) = self.running_fields[alpha].eval(x);
        (&h * dir).dot(dir)
    }
    fn terminal(&self, x: &VecF) -> f64 {
        self.terminal_field.eval(x).0
    }
    fn terminal_grad(&self, x: &VecF) -> VecF {
        self.terminal_field.eval(x).1
    }
    fn terminal_hess(&self, x: &VecF) -> MatF {
        self.terminal_field.eval(x).2
    }
}

/// Tabulate a built-in problem onto a grid (testing aid and config example).
pub fn tabulate_problem(
    problem: &ControlProblem,
    axes: Vec<AxisSpec>,
) -> TableSpec {
    let d = problem.d;
    let d1 = problem.d1;
    let shape: Vec<usize> = axes.iter().map(|a| a.n).collect();
    let nodes: usize = shape.iter().product();
    let point = |idx: usize| -> VecF {
        let mut rem = idx;
        VecF::from_fn(d, |axis, _| {
            let n = shape[axis];
            let i = rem % n;
            rem /= n;
            let h = (axes[axis].max - axes[axis].min) / (n - 1) as f64;
            axes[axis].min + i as f64 * h
        })
    };
    let nc = problem.n_controls();
    let mut sigma = vec![Vec::with_capacity(nodes); nc];
    let mut drift = vec![Vec::with_capacity(nodes); nc];
    let mut discount = vec![Vec::with_capacity(nodes); nc];
    let mut running = vec![Vec::with_capacity(nodes); nc];
    let mut terminal = Vec::with_capacity(nodes);
    for ni in 0..nodes {
        let x = point(ni);
        for alpha in 0..nc {
            let s = problem.sigma(alpha, &x);
            sigma[alpha].push((0..d).flat_map(|i| (0..d1).map(move |k| (i, k))).map(|(i, k)| s[(i, k)]).collect());
            let b = problem.drift(alpha, &x);
            drift[alpha].push(b.iter().cloned().collect());
            discount[alpha].push(problem.discount(alpha, &x));
            running[alpha].push(problem.running(alpha, &x));
        }
        terminal.push(problem.terminal(&x));
    }
    TableSpec {
        d,
        d1,
        k0: problem.k0,
        controls: problem.controls.clone(),
        axes,
        sigma,
        drift,
        discount,
        running,
        terminal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use approx::assert_relative_eq;

    fn vx(v: &[f64]) -> VecF {
        VecF::from_column_slice(v)
    }

    #[test]
    fn tabulated_benchmark_reproduces_coefficients() {
        let p = builtins::ode1d();
        let spec = tabulate_problem(
            &p,
            vec![AxisSpec {
                min: -1.05,
                max: 1.05,
                n: 43,
            }],
        );
        let q = spec.into_problem("ode1d-table").unwrap();
        for xv in [-0.7, -0.2, 0.0, 0.4, 0.9] {
            let x = vx(&[xv]);
            // Constant fields are reproduced exactly by the quadratic.
            assert_relative_eq!(q.sigma(0, &x)[(0, 0)], 2.0f64.sqrt(), epsilon = 1e-12);
            assert_relative_eq!(q.running(0, &x), 1.0, epsilon = 1e-12);
            assert_relative_eq!(q.discount(0, &x), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_terminal_interpolates_exactly_with_derivatives() {
        let p = builtins::quadratic_terminal_1d();
        let spec = tabulate_problem(
            &p,
            vec![AxisSpec {
                min: -1.05,
                max: 1.05,
                n: 22,
            }],
        );
        let q = spec.into_problem("quad-table").unwrap();
        for xv in [-0.8, -0.3, 0.25, 0.61] {
            let x = vx(&[xv]);
            assert_relative_eq!(q.terminal(&x), xv * xv, epsilon = 1e-12);
            assert_relative_eq!(q.terminal_grad(&x)[0], 2.0 * xv, epsilon = 1e-10);
            assert_relative_eq!(q.terminal_hess(&x)[(0, 0)], 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn two_dimensional_mixed_derivative() {
        // Field (x1 - x2)^2 has constant Hessian [[2,-2],[-2,2]].
        let p = builtins::paper_example_exa();
        let spec = tabulate_problem(
            &p,
            vec![
                AxisSpec {
                    min: -1.05,
                    max: 1.05,
                    n: 22,
                },
                AxisSpec {
                    min: -1.05,
                    max: 1.05,
                    n: 22,
                },
            ],
        );
        let q = spec.into_problem("exa-table").unwrap();
        let x = vx(&[0.2, -0.3]);
        let h = q.terminal_hess(&x);
        assert_relative_eq!(h[(0, 0)], 2.0, epsilon = 1e-8);
        assert_relative_eq!(h[(0, 1)], -2.0, epsilon = 1e-8);
        assert_relative_eq!(h[(1, 1)], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn shape_mismatch_reported_with_pointer() {
        let p = builtins::ode1d();
        let mut spec = tabulate_problem(
            &p,
            vec![AxisSpec {
                min: -1.0,
                max: 1.0,
                n: 11,
            }],
        );
        spec.terminal.pop();
        let err = spec.validate().unwrap_err();
        assert!(err.contains("table.terminal"), "{err}");
    }
}
