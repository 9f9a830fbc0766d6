//! Heteroscedastic growth models: the variance function `g(v; theta)`,
//! independent and clustered designs, and their log-likelihoods.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};
use crate::linalg::check_full_rank;
use crate::optim::Bounds;
use crate::quadrature::gauss_hermite;
use crate::spline::{SplineFamily, SplineSpec};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest admissible error standard deviation.
pub const G_FLOOR: f64 = 1e-8;

/// Number of grid points on which positivity of `g` is verified.
pub const POSITIVITY_GRID: usize = 512;

/// What the variance function is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Time,
    MarginalMean,
    ConditionalMean,
}

impl std::str::FromStr for IndexKind {
    type Err = GcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "time" => Ok(IndexKind::Time),
            "marginal_mean" | "marginal" => Ok(IndexKind::MarginalMean),
            "conditional_mean" | "conditional" => Ok(IndexKind::ConditionalMean),
            other => Err(GcaError::InvalidArgument(format!("unknown index kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for IndexKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            IndexKind::Time => "time",
            IndexKind::MarginalMean => "marginal_mean",
            IndexKind::ConditionalMean => "conditional_mean",
        };
        f.write_str(s)
    }
}

/// Shape restriction imposed on `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceShape {
    Constant,
    IncreasingI,
    DecreasingI,
    ConvexC,
    ConcaveC,
    IncreasingConcaveC,
}

impl VarianceShape {
    pub fn family(self) -> Option<SplineFamily> {
        match self {
            VarianceShape::Constant => None,
            VarianceShape::IncreasingI | VarianceShape::DecreasingI => Some(SplineFamily::I),
            _ => Some(SplineFamily::C),
        }
    }

    /// C-spline shapes carry an extra linear term in the index variable.
    pub fn has_linear_term(self) -> bool {
        self.family() == Some(SplineFamily::C)
    }

    /// Whether the box constraints alone already keep `g >= floor` everywhere.
    pub fn box_implies_positive(self) -> bool {
        !matches!(self, VarianceShape::ConvexC | VarianceShape::ConcaveC)
    }
}

impl std::str::FromStr for VarianceShape {
    type Err = GcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(VarianceShape::Constant),
            "increasing_i" => Ok(VarianceShape::IncreasingI),
            "decreasing_i" => Ok(VarianceShape::DecreasingI),
            "convex_c" => Ok(VarianceShape::ConvexC),
            "concave_c" => Ok(VarianceShape::ConcaveC),
            "increasing_concave_c" => Ok(VarianceShape::IncreasingConcaveC),
            other => Err(GcaError::InvalidArgument(format!("unknown variance shape '{other}'"))),
        }
    }
}

/// Error standard deviation as a shape-restricted spline of an index variable.
///
/// `theta` is laid out as `[theta_0, (theta_lin,) theta_1, ..., theta_K]`,
/// the linear coefficient being present only for C-spline shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub shape: VarianceShape,
    pub spec: Option<SplineSpec>,
    pub theta: Vec<f64>,
    pub index_kind: IndexKind,
}

impl VarianceModel {
    pub fn new(
        shape: VarianceShape,
        spec: Option<SplineSpec>,
        theta: Vec<f64>,
        index_kind: IndexKind,
    ) -> Result<Self> {
        match (shape.family(), &spec) {
            (None, None) => {}
            (None, Some(_)) => {
                return Err(GcaError::InvalidSpec("constant variance takes no spline".into()))
            }
            (Some(_), None) => {
                return Err(GcaError::InvalidSpec(format!("{shape:?} needs a spline spec")))
            }
            (Some(fam), Some(s)) if s.family != fam => {
                return Err(GcaError::InvalidSpec(format!(
                    "{shape:?} needs a {fam:?}-spline, got {:?}",
                    s.family
                )))
            }
            _ => {}
        }
        let vm = Self {
            shape,
            spec,
            theta,
            index_kind,
        };
        if vm.theta.len() != vm.n_params() {
            return Err(GcaError::DimensionMismatch(format!(
                "theta has {} entries, {:?} needs {}",
                vm.theta.len(),
                shape,
                vm.n_params()
            )));
        }
        Ok(vm)
    }

    pub fn constant(sigma: f64, index_kind: IndexKind) -> Self {
        Self {
            shape: VarianceShape::Constant,
            spec: None,
            theta: vec![sigma],
            index_kind,
        }
    }

    /// Spline dimension K.
    pub fn n_basis(&self) -> usize {
        self.spec.as_ref().map_or(0, |s| s.df())
    }

    pub fn n_params(&self) -> usize {
        1 + usize::from(self.shape.has_linear_term()) + self.n_basis()
    }

    fn offset(&self) -> usize {
        1 + usize::from(self.shape.has_linear_term())
    }

    /// Index range over which `g` is defined; values outside are clamped.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.spec.as_ref().map(|s| (s.lower, s.upper))
    }

    /// Row `[1, (v - l), basis(v)...]` so that `g(v) = row . theta`.
    pub fn features(&self, v: f64, out: &mut [f64]) {
        out[0] = 1.0;
        if let Some(spec) = &self.spec {
            let v = spec.clamp(v);
            let off = self.offset();
            if self.shape.has_linear_term() {
                out[1] = v - spec.lower;
            }
            let row = spec
                .eval_point(v)
                .expect("clamped point is always inside the boundary");
            out[off..].copy_from_slice(&row);
        }
    }

    /// Features in the transformed coordinates where every constraint is a box.
    pub fn box_features(&self, v: f64, out: &mut [f64]) {
        self.features(v, out);
        let off = self.offset();
        match self.shape {
            VarianceShape::DecreasingI => out[off..].iter_mut().for_each(|b| *b = 1.0 - *b),
            VarianceShape::ConcaveC => out[off..].iter_mut().for_each(|b| *b = -*b),
            VarianceShape::IncreasingConcaveC => {
                let lin = out[1];
                out[off..].iter_mut().for_each(|b| *b = lin - *b);
            }
            _ => {}
        }
    }

    pub fn theta_to_box(&self, theta: &[f64]) -> Vec<f64> {
        let off = self.offset();
        let mut gamma = theta.to_vec();
        let tail: f64 = theta[off..].iter().sum();
        match self.shape {
            VarianceShape::DecreasingI => {
                gamma[0] = theta[0] + tail;
                gamma[off..].iter_mut().for_each(|c| *c = -*c);
            }
            VarianceShape::ConcaveC => gamma[off..].iter_mut().for_each(|c| *c = -*c),
            VarianceShape::IncreasingConcaveC => {
                gamma[1] = theta[1] + tail;
                gamma[off..].iter_mut().for_each(|c| *c = -*c);
            }
            _ => {}
        }
        gamma
    }

    pub fn box_to_theta(&self, gamma: &[f64]) -> Vec<f64> {
        let off = self.offset();
        let mut theta = gamma.to_vec();
        let tail: f64 = gamma[off..].iter().sum();
        match self.shape {
            VarianceShape::DecreasingI => {
                theta[0] = gamma[0] + tail;
                theta[off..].iter_mut().for_each(|c| *c = -*c);
            }
            VarianceShape::ConcaveC => theta[off..].iter_mut().for_each(|c| *c = -*c),
            VarianceShape::IncreasingConcaveC => {
                theta[1] = gamma[1] + tail;
                theta[off..].iter_mut().for_each(|c| *c = -*c);
            }
            _ => {}
        }
        theta
    }

    /// Box for the transformed coordinates.
    pub fn box_bounds(&self, floor: f64) -> Bounds {
        let n = self.n_params();
        let off = self.offset();
        let mut lower = vec![0.0; n];
        let upper = vec![f64::INFINITY; n];
        lower[0] = floor;
        match self.shape {
            VarianceShape::ConvexC | VarianceShape::ConcaveC => {
                lower[0] = f64::NEG_INFINITY;
                lower[1] = f64::NEG_INFINITY;
            }
            _ => {}
        }
        for l in lower.iter_mut().skip(off) {
            *l = 0.0;
        }
        Bounds { lower, upper }
    }

    pub fn g(&self, v: f64) -> f64 {
        let mut row = vec![0.0; self.n_params()];
        self.features(v, &mut row);
        row.iter().zip(&self.theta).map(|(a, b)| a * b).sum()
    }

    /// Evenly spaced grid over the spline range (or a single point for constant `g`).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        match self.range() {
            Some((l, u)) => (0..n)
                .map(|i| l + (u - l) * i as f64 / (n - 1).max(1) as f64)
                .collect(),
            None => vec![0.0],
        }
    }

    /// Sign constraints plus positivity on the check grid.
    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        let gamma = self.theta_to_box(&self.theta);
        let bounds = self.box_bounds(G_FLOOR);
        let in_box = gamma
            .iter()
            .enumerate()
            .all(|(i, &c)| c >= bounds.lower[i] - tol && c <= bounds.upper[i]);
        in_box
            && self
                .grid(POSITIVITY_GRID)
                .into_iter()
                .all(|v| self.g(v) >= G_FLOOR - tol)
    }

    /// Same shape with `g` multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            theta: self.theta.iter().map(|t| t * c).collect(),
            ..self.clone()
        }
    }
}

/// `g(v; theta)` elementwise.
pub fn eval_g(vm: &VarianceModel, v: &[f64]) -> Result<Vec<f64>> {
    v.iter()
        .map(|&vi| {
            let g = vm.g(vi);
            if g.is_finite() && g > G_FLOOR {
                Ok(g)
            } else {
                Err(GcaError::NonPositiveVariance { value: g, at: vi })
            }
        })
        .collect()
}

/// One observation per subject.
#[derive(Debug, Clone)]
pub struct IndependentDesign {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub t: Vec<f64>,
    pub column_names: Vec<String>,
}

impl IndependentDesign {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, t: Vec<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, x, t, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        x: DMatrix<f64>,
        t: Vec<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || t.len() != n {
            return Err(GcaError::DimensionMismatch(format!(
                "y has {n} rows, X has {}, t has {}",
                x.nrows(),
                t.len()
            )));
        }
        if n <= x.ncols() {
            return Err(GcaError::RankDeficient(format!(
                "need n > p, got n = {n}, p = {}",
                x.ncols()
            )));
        }
        if y.iter().chain(t.iter()).chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(GcaError::InvalidArgument("design contains non-finite values".into()));
        }
        check_full_rank(&x, Some(&column_names))?;
        Ok(Self {
            y: DVector::from_vec(y),
            x,
            t,
            column_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn with_response(&self, y: Vec<f64>) -> Self {
        Self {
            y: DVector::from_vec(y),
            ..self.clone()
        }
    }
}

/// Observations of one subject.
#[derive(Debug, Clone)]
pub struct SubjectBlock {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub t: Vec<f64>,
}

impl SubjectBlock {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x: DMatrix<f64>, z: DMatrix<f64>, t: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            y: DVector::from_vec(y),
            x,
            z,
            t,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Repeated measures grouped by subject.
#[derive(Debug, Clone)]
pub struct ClusteredDesign {
    pub subjects: Vec<SubjectBlock>,
    pub column_names: Vec<String>,
    p: usize,
    q: usize,
}

impl ClusteredDesign {
    pub fn new(subjects: Vec<SubjectBlock>) -> Result<Self> {
        let p = subjects.first().map_or(0, |s| s.x.ncols());
        let names = (0..p).map(|j| format!("x{j}")).collect();
        Self::with_names(subjects, names)
    }

    pub fn with_names(subjects: Vec<SubjectBlock>, column_names: Vec<String>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| GcaError::InvalidArgument("clustered design has no subjects".into()))?;
        let (p, q) = (first.x.ncols(), first.z.ncols());
        for s in &subjects {
            let n = s.n();
            if n == 0 {
                return Err(GcaError::InvalidArgument(format!("subject {} has no rows", s.id)));
            }
            if s.x.ncols() != p || s.z.ncols() != q {
                return Err(GcaError::DimensionMismatch(format!(
                    "subject {} has p = {}, q = {} (expected {p}, {q})",
                    s.id,
                    s.x.ncols(),
                    s.z.ncols()
                )));
            }
            if s.x.nrows() != n || s.z.nrows() != n || s.t.len() != n {
                return Err(GcaError::DimensionMismatch(format!(
                    "subject {} blocks disagree on row count",
                    s.id
                )));
            }
            if s.y.iter().chain(s.x.iter()).chain(s.z.iter()).chain(s.t.iter()).any(|v| !v.is_finite()) {
                return Err(GcaError::InvalidArgument(format!(
                    "subject {} has non-finite values",
                    s.id
                )));
            }
        }
        let design = Self {
            subjects,
            column_names,
            p,
            q,
        };
        if design.n_obs() <= p {
            return Err(GcaError::RankDeficient("need more observations than columns".into()));
        }
        check_full_rank(&design.stacked_x(), Some(&design.column_names))?;
        Ok(design)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n()).sum()
    }

    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_obs(), self.p);
        let mut row = 0;
        for s in &self.subjects {
            x.rows_mut(row, s.n()).copy_from(&s.x);
            row += s.n();
        }
        x
    }

    pub fn stacked_y(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.y.iter().copied()).collect()
    }

    pub fn stacked_t(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.t.iter().copied()).collect()
    }

    /// Same layout with a new stacked response vector.
    pub fn with_response(&self, y: &[f64]) -> Self {
        let mut out = self.clone();
        let mut pos = 0;
        for s in &mut out.subjects {
            let n = s.n();
            s.y = DVector::from_column_slice(&y[pos..pos + n]);
            pos += n;
        }
        out
    }

    /// Stacks the subjects as independent observations.
    pub fn to_independent(&self) -> Result<IndependentDesign> {
        IndependentDesign::with_names(
            self.stacked_y(),
            self.stacked_x(),
            self.stacked_t(),
            self.column_names.clone(),
        )
    }
}

/// Covariance `B` of the random effects, stored as its log-Cholesky vector:
/// row-major lower triangle of `L` with diagonal entries on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectsCov {
    pub alpha: Vec<f64>,
    pub q: usize,
}

/// Log-diagonal floor used when `B` has a zero variance.
const LOG_DIAG_FLOOR: f64 = -345.0;

impl RandomEffectsCov {
    pub fn dim(q: usize) -> usize {
        q * (q + 1) / 2
    }

    pub fn zero(q: usize) -> Self {
        let mut alpha = vec![0.0; Self::dim(q)];
        let mut k = 0;
        for i in 0..q {
            for j in 0..=i {
                if i == j {
                    alpha[k] = LOG_DIAG_FLOOR;
                }
                k += 1;
            }
        }
        Self { alpha, q }
    }

    pub fn from_alpha(alpha: Vec<f64>, q: usize) -> Result<Self> {
        if alpha.len() != Self::dim(q) {
            return Err(GcaError::DimensionMismatch(format!(
                "alpha has {} entries, q = {q} needs {}",
                alpha.len(),
                Self::dim(q)
            )));
        }
        Ok(Self { alpha, q })
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        let mut k = 0;
        for i in 0..self.q {
            for j in 0..=i {
                l[(i, j)] = if i == j { self.alpha[k].exp() } else { self.alpha[k] };
                k += 1;
            }
        }
        l
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let l = self.cholesky_factor();
        &l * l.transpose()
    }

    pub fn from_factor(l: &DMatrix<f64>) -> Self {
        let q = l.nrows();
        let mut alpha = Vec::with_capacity(Self::dim(q));
        for i in 0..q {
            for j in 0..=i {
                if i == j {
                    let d = l[(i, i)].abs();
                    alpha.push(if d > 0.0 { d.ln().max(LOG_DIAG_FLOOR) } else { LOG_DIAG_FLOOR });
                } else {
                    alpha.push(l[(i, j)]);
                }
            }
        }
        Self { alpha, q }
    }

    pub fn from_cov(b: &DMatrix<f64>) -> Result<Self> {
        let q = b.nrows();
        if b.ncols() != q {
            return Err(GcaError::DimensionMismatch("B must be square".into()));
        }
        if q == 0 {
            return Ok(Self { alpha: vec![], q });
        }
        if q == 1 {
            if b[(0, 0)] < 0.0 {
                return Err(GcaError::SingularCovariance("negative variance".into()));
            }
            return Ok(Self::from_factor(&DMatrix::from_element(1, 1, b[(0, 0)].sqrt())));
        }
        let chol = b
            .clone()
            .cholesky()
            .ok_or_else(|| GcaError::SingularCovariance("B is not positive definite".into()))?;
        Ok(Self::from_factor(&chol.l()))
    }

    /// Standard deviation of a scalar random effect.
    pub fn sigma_b(&self) -> Option<f64> {
        (self.q == 1).then(|| self.alpha[0].exp())
    }
}

/// Everything a fit produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub column_names: Vec<String>,
    pub re_cov: RandomEffectsCov,
    pub variance: VarianceModel,
    pub blups: Vec<Vec<f64>>,
    /// Stacked residuals used for the variance fit (conditional residuals for clustered data).
    pub residuals: Vec<f64>,
    pub fitted_marginal_mean: Vec<f64>,
    pub fitted_conditional_mean: Vec<f64>,
    /// Index values `v` at which `g` was evaluated for the final weights.
    pub fitted_index: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_units: usize,
    pub n_iterations: usize,
    pub converged: bool,
    pub beta_trace: Vec<Vec<f64>>,
    /// Model-based standard errors of beta at the final weights.
    pub beta_se_model: Vec<f64>,
}

impl FitResult {
    pub fn index_kind(&self) -> IndexKind {
        self.variance.index_kind
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.variance.theta
    }
}

fn mat_vec(x: &DMatrix<f64>, beta: &[f64]) -> Result<DVector<f64>> {
    if x.ncols() != beta.len() {
        return Err(GcaError::DimensionMismatch(format!(
            "X has {} columns, beta has {} entries",
            x.ncols(),
            beta.len()
        )));
    }
    Ok(x * DVector::from_column_slice(beta))
}

/// `X_i beta` per subject.
pub fn marginal_mean(design: &ClusteredDesign, beta: &[f64]) -> Result<Vec<DVector<f64>>> {
    design.subjects.iter().map(|s| mat_vec(&s.x, beta)).collect()
}

/// `X_i beta + Z_i b_i` per subject.
pub fn conditional_mean(
    design: &ClusteredDesign,
    beta: &[f64],
    blups: &[Vec<f64>],
) -> Result<Vec<DVector<f64>>> {
    if blups.len() != design.n_subjects() {
        return Err(GcaError::DimensionMismatch(format!(
            "{} BLUP vectors for {} subjects",
            blups.len(),
            design.n_subjects()
        )));
    }
    design
        .subjects
        .iter()
        .zip(blups)
        .map(|(s, b)| Ok(mat_vec(&s.x, beta)? + mat_vec(&s.z, b)?))
        .collect()
}

/// Index values for one subject given its marginal mean.
fn subject_index(kind: IndexKind, s: &SubjectBlock, marginal: &DVector<f64>) -> Result<Vec<f64>> {
    match kind {
        IndexKind::Time => Ok(s.t.clone()),
        IndexKind::MarginalMean => Ok(marginal.iter().copied().collect()),
        IndexKind::ConditionalMean => Err(GcaError::InvalidArgument(
            "conditional-mean variance needs the integrated likelihood".into(),
        )),
    }
}

/// Exact log-likelihood when `g` does not depend on the random effects:
/// `y_i ~ MVN(X_i beta, Z_i B Z_i' + diag(g^2))`.
pub fn loglik_marginal_variance(
    design: &ClusteredDesign,
    beta: &[f64],
    re: &RandomEffectsCov,
    vm: &VarianceModel,
) -> Result<f64> {
    if re.q != design.q() {
        return Err(GcaError::DimensionMismatch(format!(
            "B is {0}x{0}, design has q = {1}",
            re.q,
            design.q()
        )));
    }
    let b = re.cov();
    let mut total = 0.0;
    for s in &design.subjects {
        let mu = mat_vec(&s.x, beta)?;
        let v = subject_index(vm.index_kind, s, &mu)?;
        let g = eval_g(vm, &v)?;
        let mut cov = &s.z * &b * s.z.transpose();
        for (j, gj) in g.iter().enumerate() {
            cov[(j, j)] += gj * gj;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| GcaError::SingularCovariance(format!("subject {}", s.id)))?;
        let r = &s.y - mu;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = r.dot(&chol.solve(&r));
        total += -0.5 * (s.n() as f64 * LN_2PI + logdet + quad);
    }
    Ok(total)
}

/// Log-likelihood of independent data, `y_i ~ N(x_i beta, g^2(v_i))`.
pub fn loglik_independent(design: &IndependentDesign, beta: &[f64], vm: &VarianceModel) -> Result<f64> {
    let mu = mat_vec(&design.x, beta)?;
    let v: Vec<f64> = match vm.index_kind {
        IndexKind::Time => design.t.clone(),
        _ => mu.iter().copied().collect(),
    };
    let g = eval_g(vm, &v)?;
    Ok(design
        .y
        .iter()
        .zip(mu.iter())
        .zip(&g)
        .map(|((y, m), s)| normal_logpdf(y - m, *s))
        .sum())
}

pub(crate) fn normal_logpdf(r: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - 0.5 * (r / sd) * (r / sd)
}

/// Log of `f(y_i | b) phi(b)` in the standardized random effect `u = b / sigma_b`.
struct SubjectIntegrand<'a> {
    resid: Vec<f64>,
    mean: Vec<f64>,
    z: Vec<f64>,
    sigma_b: f64,
    vm: &'a VarianceModel,
}

impl SubjectIntegrand<'_> {
    fn eval(&self, u: f64) -> f64 {
        let b = self.sigma_b * u;
        let mut acc = -0.5 * LN_2PI - 0.5 * u * u;
        for j in 0..self.resid.len() {
            let shift = self.z[j] * b;
            let g = self.vm.g(self.mean[j] + shift);
            if !(g > G_FLOOR) {
                return f64::NEG_INFINITY;
            }
            acc += normal_logpdf(self.resid[j] - shift, g);
        }
        acc
    }

    /// Gaussian approximation of the posterior mean of `u` with `g` frozen at `b = 0`.
    fn initial_guess(&self) -> f64 {
        let (mut num, mut den) = (0.0, 1.0);
        for j in 0..self.resid.len() {
            let g = self.vm.g(self.mean[j]).max(G_FLOOR);
            let zs = self.z[j] * self.sigma_b;
            num += zs * self.resid[j] / (g * g);
            den += zs * zs / (g * g);
        }
        num / den
    }

    /// Mode of the integrand and the curvature scale there.
    fn mode(&self) -> Result<(f64, f64)> {
        let mut u = self.initial_guess();
        let mut hu = self.eval(u);
        if !hu.is_finite() {
            u = 0.0;
            hu = self.eval(u);
        }
        if !hu.is_finite() {
            return Err(GcaError::QuadratureFailure("integrand is not finite at start".into()));
        }
        let mut converged = false;
        for _ in 0..200 {
            let d = 1e-4;
            let (up, dn) = (self.eval(u + d), self.eval(u - d));
            let grad = (up - dn) / (2.0 * d);
            let curv = (up - 2.0 * hu + dn) / (d * d);
            let mut step = if curv < 0.0 && curv.is_finite() {
                -grad / curv
            } else {
                grad.signum() * 0.5
            };
            if !step.is_finite() {
                return Err(GcaError::QuadratureFailure("non-finite Newton step".into()));
            }
            step = step.clamp(-5.0, 5.0);
            let mut accepted = false;
            for _ in 0..50 {
                let cand = u + step;
                let hc = self.eval(cand);
                if hc.is_finite() && hc >= hu {
                    u = cand;
                    hu = hc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted || step.abs() < 1e-10 {
                converged = true;
                break;
            }
        }
        if !converged || u.abs() > 1e6 {
            return Err(GcaError::QuadratureFailure("mode search diverged".into()));
        }
        let d = 1e-3;
        let curv = (self.eval(u + d) - 2.0 * hu + self.eval(u - d)) / (d * d);
        let scale = if curv.is_finite() && curv < 0.0 {
            (-1.0 / curv).sqrt()
        } else {
            1.0
        };
        Ok((u, scale))
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Log-likelihood when `g` depends on the conditional mean `X_i beta + Z_i b_i`.
///
/// Each subject's integral over its scalar random effect is computed with
/// adaptive Gauss–Hermite quadrature centred at the integrand's mode.
pub fn loglik_conditional_variance(
    design: &ClusteredDesign,
    beta: &[f64],
    re: &RandomEffectsCov,
    vm: &VarianceModel,
    n_quad: usize,
) -> Result<f64> {
    if design.q() > 1 {
        return Err(GcaError::UnsupportedDimension(design.q()));
    }
    if re.q != design.q() {
        return Err(GcaError::DimensionMismatch("B and design disagree on q".into()));
    }
    if n_quad == 0 {
        return Err(GcaError::InvalidArgument("n_quad must be positive".into()));
    }
    let (nodes, weights) = gauss_hermite(n_quad);
    let sigma_b = re.sigma_b().unwrap_or(0.0);
    let mut total = 0.0;
    for s in &design.subjects {
        let mu = mat_vec(&s.x, beta)?;
        let resid: Vec<f64> = s.y.iter().zip(mu.iter()).map(|(y, m)| y - m).collect();
        if design.q() == 0 {
            for (r, m) in resid.iter().zip(mu.iter()) {
                let g = eval_g(vm, &[*m])?[0];
                total += normal_logpdf(*r, g);
            }
            continue;
        }
        let integrand = SubjectIntegrand {
            resid,
            mean: mu.iter().copied().collect(),
            z: s.z.column(0).iter().copied().collect(),
            sigma_b,
            vm,
        };
        let (mode, scale) = integrand.mode()?;
        let root2s = std::f64::consts::SQRT_2 * scale;
        let terms: Vec<f64> = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w.ln() + x * x + integrand.eval(mode + root2s * x))
            .collect();
        let value = root2s.ln() + log_sum_exp(&terms);
        if !value.is_finite() {
            return Err(GcaError::QuadratureFailure(format!("subject {}", s.id)));
        }
        total += value;
    }
    Ok(total)
}

/// `(AIC, BIC) = (-2 logL + 2P, -2 logL + P log n)`.
pub fn information_criteria(loglik: f64, n_params: usize, n: usize) -> (f64, f64) {
    let p = n_params as f64;
    (-2.0 * loglik + 2.0 * p, -2.0 * loglik + p * (n as f64).ln())
}
