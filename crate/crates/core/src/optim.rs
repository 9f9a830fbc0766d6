//! Projected quasi-Newton minimization under box constraints.
//!
//! Variables sitting on a bound with the gradient pushing outward are held
//! fixed; a BFGS inverse-Hessian approximation drives the free variables and
//! every trial point is projected back onto the box. The objective may
//! return `+inf` to mark infeasible points; the line search backtracks
//! away from them.

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QnOptions {
    pub max_iter: usize,
    /// Projected-gradient tolerance, relative to `max(1, |f|)`.
    pub grad_tol: f64,
    /// Relative objective change below which two consecutive steps count as stalled.
    pub f_tol: f64,
}

impl Default for QnOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-9,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QnResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| {
            let stepped = (xi - gi).clamp(bounds.lower[i], bounds.upper[i]);
            (xi - stepped).abs()
        })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the box. `f` writes the gradient into its second argument.
pub fn minimize_box<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: &QnOptions) -> QnResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || n == 0 {
        return QnResult {
            x,
            f: fx,
            iterations: 0,
            converged: n == 0 && fx.is_finite(),
        };
    }

    let mut h = identity(n);
    let mut h_fresh = true;
    let mut prev_active: Vec<bool> = vec![false; n];
    let mut stalls = 0;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    for iter in 0..opts.max_iter {
        let scale = fx.abs().max(1.0);
        if projected_gradient_norm(&x, &g, bounds) <= opts.grad_tol * scale {
            return QnResult {
                x,
                f: fx,
                iterations: iter,
                converged: true,
            };
        }

        let active: Vec<bool> = (0..n)
            .map(|i| {
                let span = bounds.upper[i] - bounds.lower[i];
                let eps = 1e-12 * if span.is_finite() { span.max(1.0) } else { x[i].abs().max(1.0) };
                (x[i] <= bounds.lower[i] + eps && g[i] > 0.0)
                    || (x[i] >= bounds.upper[i] - eps && g[i] < 0.0)
            })
            .collect();
        if active != prev_active {
            h = identity(n);
            h_fresh = true;
            prev_active = active.clone();
        }

        let mut d = search_direction(&h, &g, &active);
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            h = identity(n);
            h_fresh = true;
            d = search_direction(&h, &g, &active);
            slope = dot(&d, &g);
            if slope >= 0.0 {
                break;
            }
        }

        let mut step = if h_fresh {
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 / dn.max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        let mut f_new = fx;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            bounds.project(&mut x_new);
            let moved: f64 = (0..n).map(|i| (x_new[i] - x[i]) * g[i]).sum();
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * moved.min(0.0) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if h_fresh {
                break;
            }
            h = identity(n);
            h_fresh = true;
            continue;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let rel_change = (fx - f_new).abs() / scale;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;

        if rel_change < opts.f_tol {
            stalls += 1;
            if stalls >= 3 {
                return QnResult {
                    x,
                    f: fx,
                    iterations: iter + 1,
                    converged: true,
                };
            }
        } else {
            stalls = 0;
        }

        let ss = dot(&s, &s).sqrt();
        let yy = dot(&y, &y).sqrt();
        if sy > 1e-12 * ss * yy {
            if h_fresh {
                let gamma = sy / dot(&y, &y);
                for i in 0..n {
                    for j in 0..n {
                        h[i][j] = if i == j { gamma } else { 0.0 };
                    }
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            h_fresh = false;
        }
    }

    let scale = fx.abs().max(1.0);
    let converged = projected_gradient_norm(&x, &g, bounds) <= 1e3 * opts.grad_tol * scale;
    QnResult {
        x,
        f: fx,
        iterations: opts.max_iter,
        converged,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn search_direction(h: &[Vec<f64>], g: &[f64], active: &[bool]) -> Vec<f64> {
    let n = g.len();
    (0..n)
        .map(|i| {
            if active[i] {
                0.0
            } else {
                -(0..n)
                    .filter(|&j| !active[j])
                    .map(|j| h[i][j] * g[j])
                    .sum::<f64>()
            }
        })
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Central-difference gradient wrapper for objectives without analytic derivatives.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], grad: &mut [f64]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let fx = f(x);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let dn = f(&probe);
        probe[i] = x[i];
        grad[i] = if up.is_finite() && dn.is_finite() {
            (up - dn) / (2.0 * h)
        } else if up.is_finite() {
            (up - fx) / h
        } else if dn.is_finite() {
            (fx - dn) / h
        } else {
            0.0
        };
    }
    fx
}
