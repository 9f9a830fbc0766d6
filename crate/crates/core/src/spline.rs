//! Shape-restricted spline bases.
//!
//! M-splines are B-splines rescaled to integrate to one. I-splines are their
//! running integrals and C-splines the running integrals of I-splines. All
//! three are evaluated in closed form from clamped B-spline sums:
//!
//! * `M_i = k / (t[i+k] - t[i]) * B_i^k`
//! * `I_i = sum_{j > i} B_j^{k+1}` on the knot vector with one extra
//!   boundary repetition,
//! * `C_i = sum_{j > i} w_j sum_{s > j} B_s^{k+2}` with two extra repetitions.
//!
//! `degree` is the order `k` of the M-spline recursion: degree 1 is the
//! piecewise-constant M-spline, whose I-spline is piecewise linear.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum SplineFamily {
    M,
    I,
    C,
}

impl std::str::FromStr for SplineFamily {
    type Err = GcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" => Ok(SplineFamily::M),
            "I" | "i" => Ok(SplineFamily::I),
            "C" | "c" => Ok(SplineFamily::C),
            other => Err(GcaError::InvalidSpec(format!("unknown spline family '{other}'"))),
        }
    }
}

/// Degree, boundary and internal knots of a clamped spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub family: SplineFamily,
    pub degree: usize,
    pub lower: f64,
    pub upper: f64,
    pub internal_knots: Vec<f64>,
}

impl SplineSpec {
    pub fn new(
        family: SplineFamily,
        degree: usize,
        lower: f64,
        upper: f64,
        internal_knots: Vec<f64>,
    ) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(GcaError::InvalidSpec(format!(
                "boundary must satisfy l < u, got [{lower}, {upper}]"
            )));
        }
        if degree == 0 {
            return Err(GcaError::InvalidSpec(
                "degree must be at least 1 (degree 1 is the piecewise-constant M-spline)".into(),
            ));
        }
        let mut prev = lower;
        for &knot in &internal_knots {
            if !(knot > prev && knot < upper) {
                return Err(GcaError::InvalidSpec(format!(
                    "internal knots must be strictly increasing inside ({lower}, {upper})"
                )));
            }
            prev = knot;
        }
        Ok(Self {
            family,
            degree,
            lower,
            upper,
            internal_knots,
        })
    }

    /// Spec with `df - degree` evenly spaced internal knots.
    pub fn even(family: SplineFamily, degree: usize, df: usize, lower: f64, upper: f64) -> Result<Self> {
        if degree == 0 {
            return Err(GcaError::InvalidSpec("degree must be at least 1".into()));
        }
        if df < degree {
            return Err(GcaError::InvalidSpec(format!(
                "df ({df}) must be at least the degree ({degree})"
            )));
        }
        if !(lower < upper) {
            return Err(GcaError::InvalidSpec(format!(
                "boundary must satisfy l < u, got [{lower}, {upper}]"
            )));
        }
        let m = df - degree;
        let step = (upper - lower) / (m + 1) as f64;
        let knots = (1..=m).map(|j| lower + j as f64 * step).collect();
        Self::new(family, degree, lower, upper, knots)
    }

    /// Number of non-degenerate basis functions, `m + k`.
    pub fn df(&self) -> usize {
        self.internal_knots.len() + self.degree
    }

    /// Knot vector with each boundary repeated `reps` times.
    fn knots_with(&self, reps: usize) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.internal_knots.len() + 2 * reps);
        t.extend(std::iter::repeat(self.lower).take(reps));
        t.extend_from_slice(&self.internal_knots);
        t.extend(std::iter::repeat(self.upper).take(reps));
        t
    }

    /// Full clamped knot sequence `l = t_1 = ... = t_k < ... < t_{m+k+1} = ... = u`.
    pub fn knot_sequence(&self) -> Vec<f64> {
        self.knots_with(self.degree)
    }

    pub fn with_family(&self, family: SplineFamily) -> Self {
        Self {
            family,
            ..self.clone()
        }
    }

    /// Maps `x` into `[l, u]`, absorbing floating-point drift of 1e-12 relative size.
    pub fn check_point(&self, x: f64) -> Result<f64> {
        let scale = self.lower.abs().max(self.upper.abs()).max(self.upper - self.lower);
        let tol = 1e-12 * scale;
        if x.is_nan() || x < self.lower - tol || x > self.upper + tol {
            return Err(GcaError::OutOfRange {
                x,
                lower: self.lower,
                upper: self.upper,
            });
        }
        Ok(x.clamp(self.lower, self.upper))
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    /// One row of basis values for the spec's own family.
    pub fn eval_point(&self, x: f64) -> Result<Vec<f64>> {
        let x = self.check_point(x)?;
        let mut out = vec![0.0; self.df()];
        match self.family {
            SplineFamily::M => self.mspline_row(x, &mut out),
            SplineFamily::I => self.ispline_row(x, &mut out),
            SplineFamily::C => self.cspline_row(x, &mut out),
        }
        Ok(out)
    }

    /// One row of first derivatives for the spec's own family.
    pub fn derivative_point(&self, x: f64) -> Result<Vec<f64>> {
        let x = self.check_point(x)?;
        let mut out = vec![0.0; self.df()];
        match self.family {
            SplineFamily::M => self.mspline_deriv_row(x, &mut out),
            SplineFamily::I => self.mspline_row(x, &mut out),
            SplineFamily::C => self.ispline_row(x, &mut out),
        }
        Ok(out)
    }

    fn mspline_row(&self, x: f64, out: &mut [f64]) {
        let k = self.degree;
        let t = self.knot_sequence();
        let b = bspline_values(&t, k, x);
        for (i, slot) in out.iter_mut().enumerate() {
            let span = t[i + k] - t[i];
            *slot = if span > 0.0 { k as f64 * b[i] / span } else { 0.0 };
        }
    }

    fn mspline_deriv_row(&self, x: f64, out: &mut [f64]) {
        let k = self.degree;
        if k == 1 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let t = self.knot_sequence();
        // order k-1 B-splines on the order-k knot vector; the first and last are degenerate
        let low = bspline_values(&t, k - 1, x);
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        for (i, slot) in out.iter_mut().enumerate() {
            let db = (k - 1) as f64
                * (ratio(low[i], t[i + k - 1] - t[i]) - ratio(low[i + 1], t[i + k] - t[i + 1]));
            *slot = ratio(k as f64 * db, t[i + k] - t[i]);
        }
    }

    fn ispline_row(&self, x: f64, out: &mut [f64]) {
        let k = self.degree;
        let t1 = self.knots_with(k + 1);
        let b = bspline_values(&t1, k + 1, x);
        // suffix sums over j > i
        let mut acc = 0.0;
        for i in (0..out.len()).rev() {
            acc += b[i + 1];
            out[i] = acc;
        }
    }

    fn cspline_row(&self, x: f64, out: &mut [f64]) {
        let k = self.degree;
        let t1 = self.knots_with(k + 1);
        let t2 = self.knots_with(k + 2);
        let b = bspline_values(&t2, k + 2, x);
        let n2 = b.len();
        let mut suffix = vec![0.0; n2 + 1];
        for s in (0..n2).rev() {
            suffix[s] = suffix[s + 1] + b[s];
        }
        // integral of B_j^{k+1} on t1 from l to x
        let n1 = out.len() + 1;
        let mut acc = 0.0;
        for j in (1..n1).rev() {
            let w = (t1[j + k + 1] - t1[j]) / (k + 1) as f64;
            acc += w * suffix[j + 1];
            out[j - 1] = acc;
        }
    }
}

/// Values of all `knots.len() - order` B-splines of the given order at `x`.
///
/// Spans of zero width contribute nothing, which is the 0/0 = 0 convention.
/// The right boundary belongs to the last non-empty span.
pub(crate) fn bspline_values(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    let n_basis = knots.len() - order;
    let mut out = vec![0.0; n_basis];
    let last = knots.len() - 1;
    let span = if x >= knots[last] {
        match (0..last).rev().find(|&i| knots[i] < knots[i + 1]) {
            Some(i) => i,
            None => return out,
        }
    } else {
        // largest i with knots[i] <= x < knots[i + 1]
        match knots.partition_point(|&v| v <= x) {
            0 => return out,
            p => p - 1,
        }
    };
    let p = order - 1;
    let mut n = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let den = right[r + 1] + left[j - r];
            let temp = if den != 0.0 { n[r] / den } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (r, value) in n.into_iter().enumerate() {
        let idx = span + r;
        if idx >= p && idx - p < n_basis {
            out[idx - p] = value;
        }
    }
    out
}

/// Basis values at a set of points.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub spec: SplineSpec,
    pub eval_points: Vec<f64>,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }
}

fn build(spec: &SplineSpec, x: &[f64], derivative: bool) -> Result<BasisMatrix> {
    let mut values = DMatrix::zeros(x.len(), spec.df());
    for (i, &xi) in x.iter().enumerate() {
        let row = if derivative {
            spec.derivative_point(xi)?
        } else {
            spec.eval_point(xi)?
        };
        for (j, v) in row.into_iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    Ok(BasisMatrix {
        values,
        spec: spec.clone(),
        eval_points: x.to_vec(),
    })
}

fn require_family(spec: &SplineSpec, family: SplineFamily) -> Result<()> {
    if spec.family != family {
        return Err(GcaError::InvalidSpec(format!(
            "expected a {family:?}-spline spec, got {:?}",
            spec.family
        )));
    }
    Ok(())
}

pub fn make_even_spec(
    family: SplineFamily,
    degree: usize,
    df: usize,
    lower: f64,
    upper: f64,
) -> Result<SplineSpec> {
    SplineSpec::even(family, degree, df, lower, upper)
}

pub fn eval_mspline(spec: &SplineSpec, x: &[f64]) -> Result<BasisMatrix> {
    require_family(spec, SplineFamily::M)?;
    build(spec, x, false)
}

pub fn eval_ispline(spec: &SplineSpec, x: &[f64]) -> Result<BasisMatrix> {
    require_family(spec, SplineFamily::I)?;
    build(spec, x, false)
}

pub fn eval_cspline(spec: &SplineSpec, x: &[f64]) -> Result<BasisMatrix> {
    require_family(spec, SplineFamily::C)?;
    build(spec, x, false)
}

/// Evaluates whichever family the spec carries.
pub fn eval_basis(spec: &SplineSpec, x: &[f64]) -> Result<BasisMatrix> {
    build(spec, x, false)
}

/// First derivative of the basis: M for an I-spec, I for a C-spec.
pub fn basis_derivative(spec: &SplineSpec, x: &[f64]) -> Result<BasisMatrix> {
    build(spec, x, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn even_spec_knots() {
        let s = make_even_spec(SplineFamily::I, 1, 1, 0.0, 1.0).unwrap();
        assert!(s.internal_knots.is_empty());
        assert_eq!(s.knot_sequence(), vec![0.0, 1.0]);

        let s = make_even_spec(SplineFamily::I, 2, 4, 0.0, 10.0).unwrap();
        assert_abs_diff_eq!(s.internal_knots[0], 10.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.internal_knots[1], 20.0 / 3.0, epsilon = 1e-14);
        assert_eq!(s.knot_sequence().len(), 2 + 2 * 2);

        let s = make_even_spec(SplineFamily::M, 1, 3, 0.0, 3.0).unwrap();
        assert_eq!(s.internal_knots, vec![1.0, 2.0]);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            make_even_spec(SplineFamily::I, 3, 2, 0.0, 1.0),
            Err(GcaError::InvalidSpec(_))
        ));
        assert!(make_even_spec(SplineFamily::I, 2, 2, 1.0, 1.0).is_err());
        assert!(make_even_spec(SplineFamily::C, 0, 2, 0.0, 1.0).is_err());
        assert!(SplineSpec::new(SplineFamily::M, 2, 0.0, 1.0, vec![0.5, 0.4]).is_err());
        assert!(SplineSpec::new(SplineFamily::M, 2, 0.0, 1.0, vec![1.0]).is_err());
    }

    #[test]
    fn mspline_point_values() {
        let s = make_even_spec(SplineFamily::M, 1, 1, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(eval_mspline(&s, &[0.3]).unwrap().values[(0, 0)], 1.0);

        let s = make_even_spec(SplineFamily::M, 2, 2, 0.0, 1.0).unwrap();
        let m = eval_mspline(&s, &[0.0]).unwrap();
        assert_abs_diff_eq!(m.values[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.values[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn ispline_point_values() {
        let s = make_even_spec(SplineFamily::I, 1, 1, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(eval_ispline(&s, &[0.5]).unwrap().values[(0, 0)], 0.5, epsilon = 1e-14);

        let s = make_even_spec(SplineFamily::I, 2, 4, 0.0, 10.0).unwrap();
        let m = eval_ispline(&s, &[10.0, 0.0]).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(m.values[(0, j)], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(m.values[(1, j)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cspline_point_values() {
        let s = make_even_spec(SplineFamily::C, 1, 1, 0.0, 1.0).unwrap();
        let m = eval_cspline(&s, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(m.values[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(m.values[(1, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn derivative_point_values() {
        let s = make_even_spec(SplineFamily::I, 1, 1, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(basis_derivative(&s, &[0.5]).unwrap().values[(0, 0)], 1.0);
        let s = make_even_spec(SplineFamily::C, 1, 1, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(basis_derivative(&s, &[0.5]).unwrap().values[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn out_of_range_and_clamping() {
        let s = make_even_spec(SplineFamily::I, 2, 3, 0.0, 1.0).unwrap();
        assert!(matches!(
            eval_ispline(&s, &[1.1]),
            Err(GcaError::OutOfRange { .. })
        ));
        assert!(eval_ispline(&s, &[-0.01]).is_err());
        let m = eval_ispline(&s, &[1.0 + 1e-14, -1e-14]).unwrap();
        assert_abs_diff_eq!(m.values[(0, 2)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.values[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let s = make_even_spec(SplineFamily::I, 2, 3, 0.0, 1.0).unwrap();
        assert!(eval_mspline(&s, &[0.5]).is_err());
        assert!(eval_cspline(&s, &[0.5]).is_err());
    }

    #[test]
    fn mspline_derivative_matches_difference() {
        let s = make_even_spec(SplineFamily::M, 3, 5, -1.0, 2.0).unwrap();
        let h = 1e-6;
        for &x in &[-0.7, 0.1, 0.49, 1.3, 1.9] {
            let d = s.derivative_point(x).unwrap();
            let up = s.eval_point(x + h).unwrap();
            let dn = s.eval_point(x - h).unwrap();
            for j in 0..d.len() {
                assert_abs_diff_eq!(d[j], (up[j] - dn[j]) / (2.0 * h), epsilon = 1e-5);
            }
        }
    }
}
