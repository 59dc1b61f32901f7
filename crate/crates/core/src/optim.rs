//! Unconstrained minimization: BFGS with a strong-Wolfe line search, a
//! Newton refinement using a finite-difference Hessian of the gradient, and
//! the Hessian itself for standard errors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Objective returning value and gradient, or `None` outside the domain.
pub trait Objective {
    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when a step changes no coordinate by more than this (relative).
    pub step_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Minimum {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.amax()
    }
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
    x: DVector<f64>,
    grad: DVector<f64>,
}

fn probe(f: &mut impl Objective, x: &DVector<f64>, dir: &DVector<f64>, alpha: f64) -> Option<Point> {
    let xa = x + dir * alpha;
    let (value, grad) = f.eval(&xa)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    Some(Point {
        alpha,
        value,
        slope: grad.dot(dir),
        x: xa,
        grad,
    })
}

/// Minimizer of the cubic through two points with slopes, if it lies
/// strictly inside the bracket; otherwise the midpoint.
fn cubic_step(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt() * (b - a).signum();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (min, max) = (a.min(b), a.max(b));
    let margin = 0.1 * (max - min);
    if t.is_finite() && t > min + margin && t < max - margin {
        t
    } else {
        mid
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe line search along a descent direction.
fn line_search(
    f: &mut impl Objective,
    x: &DVector<f64>,
    value: f64,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
    alpha0: f64,
) -> Option<Point> {
    let slope0 = grad.dot(dir);
    let origin = Point {
        alpha: 0.0,
        value,
        slope: slope0,
        x: x.clone(),
        grad: grad.clone(),
    };
    let mut prev = origin;
    let mut alpha = alpha0;
    for i in 0..40 {
        let cur = match probe(f, x, dir, alpha) {
            Some(p) => p,
            None => {
                // outside the domain: shrink towards the last good point
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
        };
        if cur.value > value + C1 * alpha * slope0 || (i > 0 && cur.value >= prev.value) {
            return zoom(f, x, value, slope0, dir, prev, cur);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(f, x, value, slope0, dir, cur, prev);
        }
        alpha *= 2.0;
        prev = cur;
    }
    None
}

fn zoom(
    f: &mut impl Objective,
    x: &DVector<f64>,
    value: f64,
    slope0: f64,
    dir: &DVector<f64>,
    mut lo: Point,
    mut hi: Point,
) -> Option<Point> {
    for _ in 0..60 {
        let alpha = cubic_step(&lo, &hi);
        let cur = match probe(f, x, dir, alpha) {
            Some(p) => p,
            None => {
                hi.alpha = alpha;
                hi.value = f64::INFINITY;
                continue;
            }
        };
        if cur.value > value + C1 * alpha * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    // accept a sufficient-decrease point even if curvature failed
    (lo.alpha > 0.0).then_some(lo)
}

/// Minimizes `f` from `x0` with BFGS updates of the inverse Hessian.
pub fn minimize_bfgs(f: &mut impl Objective, x0: DVector<f64>, opts: BfgsOptions) -> Option<Minimum> {
    let n = x0.len();
    let (mut value, mut grad) = f.eval(&x0)?;
    if !value.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if grad.amax() < opts.grad_tol {
            return Some(Minimum {
                x,
                value,
                gradient: grad,
                iterations,
                converged: true,
            });
        }
        iterations += 1;
        let mut dir = -(&h_inv * &grad);
        if dir.dot(&grad) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = -grad.clone();
            first = true;
        }
        let alpha0 = if first { (1.0 / grad.amax()).min(1.0) } else { 1.0 };
        let Some(step) = line_search(f, &x, value, &grad, &dir, alpha0) else {
            if first {
                break;
            }
            h_inv = DMatrix::identity(n, n);
            first = true;
            continue;
        };
        let s = &step.x - &x;
        let y = &step.grad - &grad;
        let sy = s.dot(&y);
        let small_step = s
            .iter()
            .zip(x.iter())
            .all(|(d, xi)| d.abs() <= opts.step_tol * (1.0 + xi.abs()));
        x = step.x;
        value = step.value;
        grad = step.grad;
        if small_step {
            break;
        }
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            first = false;
        }
    }
    let converged = grad.amax() < opts.grad_tol;
    Some(Minimum {
        x,
        value,
        gradient: grad,
        iterations,
        converged,
    })
}

/// Central-difference Hessian of an analytic gradient, symmetrized.
/// Steps are `rel · (1 + |x_i|)`.
pub fn hessian_from_gradient(f: &mut impl Objective, x: &DVector<f64>, rel: f64) -> Option<DMatrix<f64>> {
    let n = x.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let step = rel * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += step;
        let mut xm = x.clone();
        xm[i] -= step;
        let gp = f.eval(&xp)?.1;
        let gm = f.eval(&xm)?.1;
        h.set_column(i, &((gp - gm) / (2.0 * step)));
    }
    let sym = (&h + h.transpose()) * 0.5;
    sym.iter().all(|v| v.is_finite()).then_some(sym)
}

/// Newton iterations with a numeric Hessian, accepted only while they
/// reduce the gradient norm without increasing the objective materially.
pub fn newton_polish(f: &mut impl Objective, mut min: Minimum, max_steps: usize, tol: f64) -> Minimum {
    for _ in 0..max_steps {
        if min.gradient.amax() < tol {
            break;
        }
        let Some(h) = hessian_from_gradient(f, &min.x, 1e-5) else {
            break;
        };
        let Some(chol) = h.cholesky() else {
            break;
        };
        let step = chol.solve(&min.gradient);
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let x = &min.x - &step * scale;
            if let Some((v, g)) = f.eval(&x) {
                let slack = 1e-10 * (1.0 + min.value.abs());
                if v.is_finite() && v <= min.value + slack && g.amax() < min.gradient.amax() {
                    min = Minimum {
                        x,
                        value: v,
                        gradient: g,
                        iterations: min.iterations + 1,
                        converged: min.converged,
                    };
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    min
}

/// Central-difference gradient of a scalar function, used by tests as an
/// independent check of analytic gradients.
pub fn numeric_gradient(f: &mut impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>, rel: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let step = rel * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += step;
        let mut xm = x.clone();
        xm[i] -= step;
        (f(&xp) - f(&xm)) / (2.0 * step)
    })
}
