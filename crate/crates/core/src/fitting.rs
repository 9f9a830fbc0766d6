//! Point estimation: weighted least squares, weighted maximum-likelihood
//! mixed models, the constrained variance-coefficient MLE, and the
//! iteratively reweighted loop that alternates between them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};
use crate::linalg::qr_solve;
use crate::model::{
    information_criteria, loglik_conditional_variance, loglik_independent,
    loglik_marginal_variance, ClusteredDesign, LN_2PI, FitResult, IndependentDesign, IndexKind,
    RandomEffectsCov, VarianceModel, VarianceShape, G_FLOOR, POSITIVITY_GRID,
};
use crate::optim::{minimize_box, numeric_gradient, Bounds, QnOptions};
use crate::spline::SplineSpec;

/// Lower bound on `g` at the data, relative to the residual scale. Without it a
/// single observation whose variance is carried by its random effect can drag
/// `g` to zero there, and the reweighted fit degenerates.
pub const THETA_REL_FLOOR: f64 = 1e-3;

/// Bounds on the log-diagonal of the relative random-effects factor.
const LOG_REL_SD_BOUNDS: (f64, f64) = (-12.0, 8.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPolicy {
    /// Variance-spline knots come from the initial fit and never move.
    FreezeAfterInit,
}

/// Criterion maximized by the variance step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceCriterion {
    /// Likelihood of the residuals with the mean coefficients held fixed.
    Ml,
    /// Restricted likelihood: adds `log det(X' W X) / 2`, which accounts for the
    /// mean coefficients being estimated (residuals at high-leverage points shrink).
    /// Used for independent data only.
    Reml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrwConfig {
    pub max_iter: usize,
    pub beta_rel_tol: f64,
    pub theta_floor: f64,
    pub knot_policy: KnotPolicy,
    pub n_quad: usize,
    /// Random restarts of the variance-coefficient optimizer.
    pub n_starts: usize,
    pub seed: u64,
    pub variance_criterion: VarianceCriterion,
}

impl Default for IrwConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            beta_rel_tol: 1e-6,
            theta_floor: G_FLOOR,
            knot_policy: KnotPolicy::FreezeAfterInit,
            n_quad: 21,
            n_starts: 5,
            seed: 20230501,
            variance_criterion: VarianceCriterion::Ml,
        }
    }
}

impl IrwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(GcaError::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.beta_rel_tol > 0.0) {
            return Err(GcaError::InvalidArgument("beta_rel_tol must be positive".into()));
        }
        if self.n_quad == 0 {
            return Err(GcaError::InvalidArgument("n_quad must be positive".into()));
        }
        Ok(())
    }
}

/// Shape and spline size of a variance model whose knots are not placed yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarianceTemplate {
    pub shape: VarianceShape,
    pub degree: usize,
    pub df: usize,
    pub index_kind: IndexKind,
}

impl VarianceTemplate {
    pub fn constant(index_kind: IndexKind) -> Self {
        Self {
            shape: VarianceShape::Constant,
            degree: 0,
            df: 0,
            index_kind,
        }
    }

    pub fn increasing(degree: usize, df: usize, index_kind: IndexKind) -> Self {
        Self {
            shape: VarianceShape::IncreasingI,
            degree,
            df,
            index_kind,
        }
    }

    /// Places evenly spaced knots over `[lower, upper]`.
    pub fn build(&self, lower: f64, upper: f64) -> Result<VarianceModel> {
        let spec = match self.shape.family() {
            None => None,
            Some(family) => {
                let (lo, hi) = widen(lower, upper);
                Some(SplineSpec::even(family, self.degree, self.df, lo, hi)?)
            }
        };
        let mut theta = vec![0.0; 1 + usize::from(self.shape.has_linear_term()) + spec.as_ref().map_or(0, |s| s.df())];
        theta[0] = 1.0;
        VarianceModel::new(self.shape, spec, theta, self.index_kind)
    }
}

fn widen(lower: f64, upper: f64) -> (f64, f64) {
    if upper - lower > 1e-9 * lower.abs().max(upper.abs()).max(1.0) {
        (lower, upper)
    } else {
        let pad = 0.5 * lower.abs().max(1.0) * 1e-3;
        (lower - pad, upper + pad)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Minimizer of `sum w_i (y_i - x_i' beta)^2`; `weights` are squared-loss weights.
pub fn fit_wls(x: &DMatrix<f64>, y: &DVector<f64>, weights: &[f64]) -> Result<DVector<f64>> {
    if x.nrows() != y.len() || weights.len() != y.len() {
        return Err(GcaError::DimensionMismatch(format!(
            "X has {} rows, y {}, weights {}",
            x.nrows(),
            y.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(GcaError::InvalidArgument("weights must be positive and finite".into()));
    }
    let mut xs = x.clone();
    let mut ys = y.clone();
    for (i, w) in weights.iter().enumerate() {
        let s = w.sqrt();
        xs.row_mut(i).scale_mut(s);
        ys[i] *= s;
    }
    qr_solve(&xs, &ys)
}

/// Sufficient statistics of one subject under fixed observation weights.
struct SubjectStats {
    xtx: DMatrix<f64>,
    xtz: DMatrix<f64>,
    ztz: DMatrix<f64>,
    xty: DVector<f64>,
    zty: DVector<f64>,
    yty: f64,
    log_det_d: f64,
}

fn subject_stats(design: &ClusteredDesign, weights: &[f64]) -> Vec<SubjectStats> {
    let mut pos = 0;
    design
        .subjects
        .iter()
        .map(|s| {
            let n = s.n();
            let w = &weights[pos..pos + n];
            pos += n;
            let mut xw = s.x.clone();
            let mut zw = s.z.clone();
            let mut yw = s.y.clone();
            for (i, wi) in w.iter().enumerate() {
                xw.row_mut(i).scale_mut(*wi);
                zw.row_mut(i).scale_mut(*wi);
                yw[i] *= wi;
            }
            SubjectStats {
                xtx: xw.transpose() * &xw,
                xtz: xw.transpose() * &zw,
                ztz: zw.transpose() * &zw,
                xty: xw.transpose() * &yw,
                zty: zw.transpose() * &yw,
                yty: yw.dot(&yw),
                log_det_d: -2.0 * w.iter().map(|v| v.ln()).sum::<f64>(),
            }
        })
        .collect()
}

/// Profiled quantities at one value of the relative covariance factor.
struct Profile {
    loglik: f64,
    beta: DVector<f64>,
    sigma2: f64,
    xtvx: DMatrix<f64>,
}

fn profile_at(stats: &[SubjectStats], l: &DMatrix<f64>, n_obs: usize) -> Option<Profile> {
    let p = stats.first()?.xtx.nrows();
    let q = l.nrows();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut c = DVector::<f64>::zeros(p);
    let mut s_yy = 0.0;
    let mut log_det = 0.0;
    for st in stats {
        log_det += st.log_det_d;
        if q == 0 {
            a += &st.xtx;
            c += &st.xty;
            s_yy += st.yty;
            continue;
        }
        let lt = l.transpose();
        let m = DMatrix::identity(q, q) + &lt * &st.ztz * l;
        let chol = m.cholesky()?;
        log_det += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let xzl = &st.xtz * l;
        let zyl = &lt * &st.zty;
        let minv_zx = chol.solve(&xzl.transpose());
        let minv_zy = chol.solve(&zyl);
        a += &st.xtx - &xzl * minv_zx;
        c += &st.xty - &xzl * &minv_zy;
        s_yy += st.yty - zyl.dot(&minv_zy);
    }
    let chol_a = a.clone().cholesky()?;
    let beta = chol_a.solve(&c);
    let rss = (s_yy - c.dot(&beta)).max(1e-300);
    let n = n_obs as f64;
    let sigma2 = rss / n;
    let loglik = -0.5 * n * (LN_2PI + sigma2.ln() + 1.0) - 0.5 * log_det;
    Some(Profile {
        loglik,
        beta,
        sigma2,
        xtvx: a,
    })
}

fn factor_from_rel(alpha: &[f64], q: usize) -> DMatrix<f64> {
    RandomEffectsCov::from_alpha(alpha.to_vec(), q)
        .expect("alpha length matches q")
        .cholesky_factor()
}

/// Weighted ML fit of a linear mixed-effects model.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub beta: Vec<f64>,
    /// Absolute random-effects covariance `B`.
    pub re_cov: RandomEffectsCov,
    /// Error scale: observation `j` has SD `sigma / w_j`.
    pub sigma2: f64,
    pub blups: Vec<Vec<f64>>,
    pub loglik: f64,
    pub beta_cov: DMatrix<f64>,
    pub converged: bool,
    /// Log-Cholesky of `B / sigma^2` for warm starts.
    pub alpha_rel: Vec<f64>,
}

/// Maximum-likelihood fit with known observation weights `w` (inverse error SDs
/// up to a common profiled scale): `y_i ~ MVN(X_i beta, Z_i B Z_i' + sigma^2 diag(1/w^2))`.
pub fn fit_lmm_ml(design: &ClusteredDesign, weights: &[f64]) -> Result<LmmFit> {
    fit_lmm_ml_from(design, weights, None)
}

pub fn fit_lmm_ml_from(
    design: &ClusteredDesign,
    weights: &[f64],
    warm_start: Option<&[f64]>,
) -> Result<LmmFit> {
    let n_obs = design.n_obs();
    if weights.len() != n_obs {
        return Err(GcaError::DimensionMismatch(format!(
            "{} weights for {} observations",
            weights.len(),
            n_obs
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(GcaError::InvalidArgument("weights must be positive and finite".into()));
    }
    // geometric-mean normalization makes the fit exactly invariant to weight scale
    let log_gm = weights.iter().map(|w| w.ln()).sum::<f64>() / n_obs as f64;
    let gm = log_gm.exp();
    let w_norm: Vec<f64> = weights.iter().map(|w| w / gm).collect();
    let stats = subject_stats(design, &w_norm);
    let q = design.q();
    let dim = RandomEffectsCov::dim(q);

    let objective = |alpha: &[f64]| -> f64 {
        let l = factor_from_rel(alpha, q);
        match profile_at(&stats, &l, n_obs) {
            Some(p) if p.loglik.is_finite() => -p.loglik,
            _ => f64::INFINITY,
        }
    };

    let (alpha, converged) = if dim == 0 {
        (vec![], true)
    } else {
        let mut bounds = Bounds::unbounded(dim);
        let mut k = 0;
        for i in 0..q {
            for j in 0..=i {
                if i == j {
                    bounds.lower[k] = LOG_REL_SD_BOUNDS.0;
                    bounds.upper[k] = LOG_REL_SD_BOUNDS.1;
                } else {
                    bounds.lower[k] = -1e4;
                    bounds.upper[k] = 1e4;
                }
                k += 1;
            }
        }
        let mut starts: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm_start.filter(|w| w.len() == dim) {
            let mut w = w.to_vec();
            bounds.project(&mut w);
            starts.push(w);
        }
        let diag_start = |v: f64| {
            let mut a = vec![0.0; dim];
            let mut k = 0;
            for i in 0..q {
                for j in 0..=i {
                    if i == j {
                        a[k] = v;
                    }
                    k += 1;
                }
            }
            a
        };
        // coarse scan of the common log-scale
        let mut best_scan = (f64::INFINITY, diag_start(0.0));
        for step in 0..11 {
            let v = -9.0 + 1.2 * step as f64;
            let a = diag_start(v);
            let f = objective(&a);
            if f < best_scan.0 {
                best_scan = (f, a);
            }
        }
        // a warm start only gets company when the scan already beats it
        if starts.first().is_none_or(|w| best_scan.0 < objective(w)) {
            starts.push(best_scan.1);
        }

        let opts = QnOptions {
            max_iter: 200,
            grad_tol: 1e-8,
            f_tol: 1e-13,
        };
        let mut best: Option<(f64, Vec<f64>, bool)> = None;
        for start in starts {
            let res = minimize_box(
                |a, g| numeric_gradient(|x| objective(x), a, g),
                &start,
                &bounds,
                &opts,
            );
            if res.f.is_finite() && best.as_ref().is_none_or(|b| res.f < b.0) {
                best = Some((res.f, res.x, res.converged));
            }
        }
        let (_, a, conv) = best.ok_or_else(|| {
            GcaError::NonConvergence("mixed-model likelihood is not finite anywhere".into())
        })?;
        (a, conv)
    };

    let l = factor_from_rel(&alpha, q);
    let prof = profile_at(&stats, &l, n_obs)
        .ok_or_else(|| GcaError::RankDeficient("X' V^-1 X is singular".into()))?;
    let beta = prof.beta.clone();

    // BLUPs: b_i = L M^-1 L' Z' D^-1 (y - X beta)
    let blups = stats
        .iter()
        .map(|st| {
            if q == 0 {
                return vec![];
            }
            let lt = l.transpose();
            let m = DMatrix::identity(q, q) + &lt * &st.ztz * &l;
            let u = &lt * (&st.zty - st.xtz.transpose() * &beta);
            let chol = m.cholesky().expect("I + L'Z'DZL is positive definite");
            (&l * chol.solve(&u)).iter().copied().collect()
        })
        .collect();

    let sigma2_norm = prof.sigma2;
    let b_abs = &l * l.transpose() * sigma2_norm;
    let re_cov = RandomEffectsCov::from_factor(&(&l * sigma2_norm.sqrt()));
    debug_assert!((re_cov.cov() - &b_abs).abs().max() <= 1e-8 * b_abs.abs().max().max(1.0));
    let beta_cov = prof
        .xtvx
        .clone()
        .try_inverse()
        .ok_or_else(|| GcaError::RankDeficient("X' V^-1 X is singular".into()))?
        * sigma2_norm;

    Ok(LmmFit {
        beta: beta.iter().copied().collect(),
        re_cov,
        sigma2: sigma2_norm * gm * gm,
        blups,
        loglik: prof.loglik,
        beta_cov,
        converged,
        alpha_rel: alpha,
    })
}

/// Estimates at a fixed relative covariance factor (generalized least squares).
pub fn lmm_profile_at(
    design: &ClusteredDesign,
    weights: &[f64],
    alpha_rel: &[f64],
) -> Result<(Vec<f64>, f64, f64)> {
    let stats = subject_stats(design, weights);
    let l = factor_from_rel(alpha_rel, design.q());
    let p = profile_at(&stats, &l, design.n_obs())
        .ok_or_else(|| GcaError::RankDeficient("X' V^-1 X is singular".into()))?;
    Ok((p.beta.iter().copied().collect(), p.sigma2, p.loglik))
}

/// Constrained ML estimate of the variance coefficients.
#[derive(Debug, Clone)]
pub struct ThetaFit {
    pub model: VarianceModel,
    /// Negative log-likelihood without the `log(2 pi) / 2` constants.
    pub objective: f64,
    pub converged: bool,
}

/// Treats `residuals` as draws from `N(0, g^2(v; theta))` and maximizes over
/// `theta` subject to the template's shape constraints.
pub fn fit_theta_mle(
    residuals: &[f64],
    index_values: &[f64],
    template: &VarianceModel,
    config: &IrwConfig,
) -> Result<ThetaFit> {
    fit_theta_mle_from(residuals, index_values, template, config, None, config.seed)
}

pub fn fit_theta_mle_from(
    residuals: &[f64],
    index_values: &[f64],
    template: &VarianceModel,
    config: &IrwConfig,
    warm_start: Option<&[f64]>,
    seed: u64,
) -> Result<ThetaFit> {
    let n = residuals.len();
    if index_values.len() != n {
        return Err(GcaError::DimensionMismatch(format!(
            "{} residuals but {} index values",
            n,
            index_values.len()
        )));
    }
    if n == 0 {
        return Err(GcaError::InvalidArgument("no residuals".into()));
    }
    let e2: Vec<f64> = residuals.iter().map(|e| e * e).collect();
    let rms = (e2.iter().sum::<f64>() / n as f64).sqrt().max(config.theta_floor);

    if template.shape == VarianceShape::Constant {
        let mut model = template.clone();
        model.theta = vec![rms];
        let objective = n as f64 * rms.ln() + 0.5 * n as f64;
        return Ok(ThetaFit {
            model,
            objective,
            converged: true,
        });
    }

    let k = template.n_params();
    let phi = feature_rows(template, index_values);
    let floor = config.theta_floor.max(THETA_REL_FLOOR * rms);
    let objective = |gamma: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut f = 0.0;
        for (row, &ee) in phi.chunks_exact(k).zip(&e2) {
            let g = dot(row, gamma);
            if !(g >= floor) {
                return f64::INFINITY;
            }
            let inv = 1.0 / g;
            f += g.ln() + 0.5 * ee * inv * inv;
            let dg = inv - ee * inv * inv * inv;
            for (gr, r) in grad.iter_mut().zip(row) {
                *gr += dg * r;
            }
        }
        f
    };
    constrained_search(template, config, &phi, rms, floor, warm_start, seed, objective)
}

/// [`fit_theta_mle_from`] with the restricted-likelihood term for a mean
/// `X beta` that was fitted by weighted least squares. Independent data only;
/// clustered fits always use the ML step.
pub fn fit_theta_reml_from(
    residuals: &[f64],
    index_values: &[f64],
    x: &DMatrix<f64>,
    template: &VarianceModel,
    config: &IrwConfig,
    warm_start: Option<&[f64]>,
    seed: u64,
) -> Result<ThetaFit> {
    let n = residuals.len();
    let p = x.ncols();
    if index_values.len() != n || x.nrows() != n {
        return Err(GcaError::DimensionMismatch("theta step inputs disagree with the design".into()));
    }
    if n <= p {
        return Err(GcaError::RankDeficient("need more observations than mean columns".into()));
    }
    let e2: Vec<f64> = residuals.iter().map(|e| e * e).collect();
    let rms = (e2.iter().sum::<f64>() / (n - p) as f64).sqrt().max(config.theta_floor);
    if template.shape == VarianceShape::Constant {
        let mut model = template.clone();
        model.theta = vec![rms];
        let objective = (n - p) as f64 * (rms.ln() + 0.5);
        return Ok(ThetaFit {
            model,
            objective,
            converged: true,
        });
    }

    let k = template.n_params();
    let phi = feature_rows(template, index_values);
    let floor = config.theta_floor.max(THETA_REL_FLOOR * rms);
    let objective = |gamma: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut g = Vec::with_capacity(n);
        for row in phi.chunks_exact(k) {
            let gi = dot(row, gamma);
            if !(gi >= floor) {
                return f64::INFINITY;
            }
            g.push(gi);
        }
        let mut xw = x.clone();
        for (i, gi) in g.iter().enumerate() {
            xw.row_mut(i).scale_mut(1.0 / gi);
        }
        let Some(chol) = (xw.transpose() * &xw).cholesky() else {
            return f64::INFINITY;
        };
        // leverages of the weighted fit: h_i = x_i' A^-1 x_i / g_i^2
        let solved = chol.solve(&xw.transpose());
        let mut f = 0.5 * chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        for (i, (row, &ee)) in phi.chunks_exact(k).zip(&e2).enumerate() {
            let h: f64 = xw.row(i).iter().zip(solved.column(i).iter()).map(|(a, b)| a * b).sum();
            let inv = 1.0 / g[i];
            f += g[i].ln() + 0.5 * ee * inv * inv;
            let dg = inv - ee * inv * inv * inv - h * inv;
            for (gr, r) in grad.iter_mut().zip(row) {
                *gr += dg * r;
            }
        }
        f
    };
    constrained_search(template, config, &phi, rms, floor, warm_start, seed, objective)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn feature_rows(template: &VarianceModel, index_values: &[f64]) -> Vec<f64> {
    let k = template.n_params();
    let mut phi = vec![0.0; index_values.len() * k];
    for (i, &v) in index_values.iter().enumerate() {
        template.box_features(v, &mut phi[i * k..(i + 1) * k]);
    }
    phi
}

/// Multistart projected quasi-Newton over the box coordinates of `template`.
/// `objective` must return `+inf` where `g` drops below the floor at a data point;
/// the floor on the whole positivity grid is checked here.
fn constrained_search(
    template: &VarianceModel,
    config: &IrwConfig,
    phi: &[f64],
    scale: f64,
    floor: f64,
    warm_start: Option<&[f64]>,
    seed: u64,
    objective: impl Fn(&[f64], &mut [f64]) -> f64,
) -> Result<ThetaFit> {
    let k = template.n_params();
    let grid_phi = if template.shape.box_implies_positive() {
        vec![]
    } else {
        feature_rows(template, &template.grid(POSITIVITY_GRID))
    };
    let guarded = |gamma: &[f64], grad: &mut [f64]| -> f64 {
        if grid_phi.chunks_exact(k).any(|row| !(dot(row, gamma) >= floor)) {
            return f64::INFINITY;
        }
        objective(gamma, grad)
    };

    let mut bounds = template.box_bounds(floor);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm_start.filter(|w| w.len() == k) {
        starts.push(template.theta_to_box(w));
    }
    let mut constant_start = vec![0.0; k];
    constant_start[0] = scale;
    starts.push(constant_start);
    // per-feature magnitude for scaling random starts
    let col_scale: Vec<f64> = (0..k)
        .map(|j| phi.chunks_exact(k).map(|r| r[j].abs()).fold(0.0, f64::max))
        .collect();
    let off = 1 + usize::from(template.shape.has_linear_term());
    // a basis column that vanishes at every data point is unidentified; hold it at the value nearest 0
    for j in off..k {
        if col_scale[j] <= 1e-10 {
            let v = 0.0f64.clamp(bounds.lower[j], bounds.upper[j]);
            bounds.lower[j] = v;
            bounds.upper[j] = v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.n_starts {
        let mut g = vec![0.0; k];
        g[0] = scale * rng.random_range(0.05..1.0);
        if off == 2 {
            g[1] = match template.shape {
                VarianceShape::IncreasingConcaveC => rng.random_range(0.0..1.0),
                _ => rng.random_range(-0.5..0.5),
            } * scale
                / col_scale[1].max(1e-12);
        }
        for j in off..k {
            g[j] = rng.random_range(0.0..1.0) * 2.0 * scale / (col_scale[j].max(1e-10) * (k - off) as f64);
        }
        starts.push(g);
    }

    let opts = QnOptions {
        max_iter: 400,
        grad_tol: 1e-10,
        f_tol: 1e-14,
    };
    let mut scratch = vec![0.0; k];
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for mut start in starts {
        bounds.project(&mut start);
        if !guarded(&start, &mut scratch).is_finite() {
            continue;
        }
        let res = minimize_box(guarded, &start, &bounds, &opts);
        if res.f.is_finite() && best.as_ref().is_none_or(|b| res.f < b.0) {
            best = Some((res.f, res.x, res.converged));
        }
    }
    let (f, gamma, converged) = best.ok_or(GcaError::NonPositiveVariance {
        value: f64::NAN,
        at: f64::NAN,
    })?;
    let mut model = template.clone();
    model.theta = template.box_to_theta(&gamma);
    Ok(ThetaFit {
        model,
        objective: f,
        converged,
    })
}

/// Variance coefficients maximizing the Gaussian likelihood of clustered data
/// with `beta`, `B` and the index values held fixed:
/// `y_i - X_i beta ~ MVN(0, Z_i B Z_i' + diag(g^2(v_i; theta)))`.
///
/// With `B = 0` this is [`fit_theta_mle`] on the marginal residuals.
pub fn fit_theta_clustered(
    design: &ClusteredDesign,
    beta: &[f64],
    re_cov: &RandomEffectsCov,
    index_values: &[f64],
    template: &VarianceModel,
    config: &IrwConfig,
    warm_start: Option<&[f64]>,
    seed: u64,
) -> Result<ThetaFit> {
    let n_obs = design.n_obs();
    if index_values.len() != n_obs || beta.len() != design.p() || re_cov.q != design.q() {
        return Err(GcaError::DimensionMismatch("theta step inputs disagree with the design".into()));
    }
    let bv = DVector::from_column_slice(beta);
    let l = re_cov.cholesky_factor();
    let q = design.q();
    struct Block {
        r: Vec<f64>,
        /// Row-major `Z_i L`.
        zl: Vec<f64>,
        start: usize,
    }
    let mut blocks = Vec::with_capacity(design.n_subjects());
    let mut pos = 0;
    let (mut sum_r2, mut sum_re) = (0.0, 0.0);
    for s in &design.subjects {
        let r: Vec<f64> = (&s.y - &s.x * &bv).iter().copied().collect();
        let zl_mat = &s.z * &l;
        let zl: Vec<f64> = (0..s.n()).flat_map(|j| zl_mat.row(j).iter().copied().collect::<Vec<_>>()).collect();
        sum_r2 += r.iter().map(|v| v * v).sum::<f64>();
        sum_re += zl.iter().map(|v| v * v).sum::<f64>();
        blocks.push(Block { r, zl, start: pos });
        pos += s.n();
    }
    let resid_var = (sum_r2 - sum_re).max(0.01 * sum_r2) / n_obs as f64;
    let scale = resid_var.sqrt().max(config.theta_floor);

    if template.shape == VarianceShape::Constant && q == 0 {
        let all: Vec<f64> = blocks.iter().flat_map(|b| b.r.iter().copied()).collect();
        return fit_theta_mle_from(&all, index_values, template, config, warm_start, seed);
    }

    let k = template.n_params();
    let phi = feature_rows(template, index_values);
    let floor = config.theta_floor.max(THETA_REL_FLOOR * scale);
    let max_n = blocks.iter().map(|b| b.r.len()).max().unwrap_or(0);
    let objective = |gamma: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut f = 0.0;
        let mut g = vec![0.0; max_n];
        let mut m = vec![0.0; q * q];
        let mut minv = vec![0.0; q * q];
        let mut u = vec![0.0; q];
        let mut minv_u = vec![0.0; q];
        let mut a = vec![0.0; q];
        for b in &blocks {
            let n = b.r.len();
            for j in 0..n {
                let gj = dot(&phi[(b.start + j) * k..(b.start + j + 1) * k], gamma);
                if !(gj >= floor) {
                    return f64::INFINITY;
                }
                g[j] = gj;
            }
            // Woodbury with M = I + L'Z' D^-1 Z L, D = diag(g^2)
            let mut log_det_m = 0.0;
            if q > 0 {
                m.iter_mut().for_each(|v| *v = 0.0);
                u.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..q {
                    m[i * q + i] = 1.0;
                }
                for j in 0..n {
                    let dinv = 1.0 / (g[j] * g[j]);
                    let row = &b.zl[j * q..(j + 1) * q];
                    for r in 0..q {
                        u[r] += row[r] * b.r[j] * dinv;
                        for c in 0..q {
                            m[r * q + c] += row[r] * row[c] * dinv;
                        }
                    }
                }
                match small_cholesky(&mut m, q) {
                    Some(ld) => log_det_m = ld,
                    None => return f64::INFINITY,
                }
                small_cholesky_inverse(&m, q, &mut minv, &mut a);
                for r in 0..q {
                    minv_u[r] = (0..q).map(|c| minv[r * q + c] * u[c]).sum();
                }
            }
            for j in 0..n {
                let d = g[j] * g[j];
                let (mut vr, mut vjj) = (b.r[j] / d, 1.0 / d);
                if q > 0 {
                    let row = &b.zl[j * q..(j + 1) * q];
                    for r in 0..q {
                        a[r] = row[r] / d;
                    }
                    let mut quad = 0.0;
                    for r in 0..q {
                        vr -= a[r] * minv_u[r];
                        for c in 0..q {
                            quad += a[r] * minv[r * q + c] * a[c];
                        }
                    }
                    vjj -= quad;
                }
                f += g[j].ln() + 0.5 * b.r[j] * vr;
                let coef = (vjj - vr * vr) * g[j];
                let row_phi = &phi[(b.start + j) * k..(b.start + j + 1) * k];
                for (gr, p) in grad.iter_mut().zip(row_phi) {
                    *gr += coef * p;
                }
            }
            f += 0.5 * log_det_m;
        }
        f
    };
    constrained_search(template, config, &phi, scale, floor, warm_start, seed, objective)
}

/// In-place lower Cholesky factor of a small row-major SPD matrix; returns `log det`.
fn small_cholesky(a: &mut [f64], q: usize) -> Option<f64> {
    let mut log_det = 0.0;
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let ljj = d.sqrt();
        a[j * q + j] = ljj;
        log_det += 2.0 * ljj.ln();
        for i in j + 1..q {
            let mut v = a[i * q + j];
            for k in 0..j {
                v -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = v / ljj;
        }
    }
    Some(log_det)
}

/// `(L L')^-1` from a factor produced by [`small_cholesky`]; `y` is scratch of length `q`.
fn small_cholesky_inverse(l: &[f64], q: usize, out: &mut [f64], y: &mut [f64]) {
    for col in 0..q {
        // solve L y = e_col, then L' x = y
        for i in 0..q {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                v -= l[i * q + k] * y[k];
            }
            y[i] = v / l[i * q + i];
        }
        for i in (0..q).rev() {
            let mut v = y[i];
            for k in i + 1..q {
                v -= l[k * q + i] * out[k * q + col];
            }
            out[i * q + col] = v / l[i * q + i];
        }
    }
}

/// Either kind of design, for code that handles both.
#[derive(Debug, Clone)]
pub enum Design {
    Independent(IndependentDesign),
    Clustered(ClusteredDesign),
}

impl Design {
    pub fn n_units(&self) -> usize {
        match self {
            Design::Independent(d) => d.n(),
            Design::Clustered(d) => d.n_subjects(),
        }
    }

    pub fn p(&self) -> usize {
        match self {
            Design::Independent(d) => d.p(),
            Design::Clustered(d) => d.p(),
        }
    }
}

pub fn irw_fit(design: &Design, template: &VarianceTemplate, config: &IrwConfig) -> Result<FitResult> {
    match design {
        Design::Independent(d) => irw_fit_independent(d, template, config),
        Design::Clustered(d) => irw_fit_clustered(d, template, config),
    }
}

fn beta_change(old: &[f64], new: &[f64]) -> f64 {
    let diff = old.iter().zip(new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = new.iter().map(|b| b.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

/// Iteratively reweighted fit for one observation per subject.
pub fn irw_fit_independent(
    design: &IndependentDesign,
    template: &VarianceTemplate,
    config: &IrwConfig,
) -> Result<FitResult> {
    config.validate()?;
    if template.index_kind == IndexKind::ConditionalMean {
        return Err(GcaError::InvalidArgument(
            "independent data has no conditional mean; use marginal_mean".into(),
        ));
    }
    let n = design.n();
    let mut beta = fit_wls(&design.x, &design.y, &vec![1.0; n])?;
    let index_of = |beta: &DVector<f64>| -> Vec<f64> {
        match template.index_kind {
            IndexKind::Time => design.t.clone(),
            _ => (&design.x * beta).iter().copied().collect(),
        }
    };
    let mut v = index_of(&beta);
    let (lo, hi) = min_max(&v);
    let mut vm = template.build(lo, hi)?;
    let mut trace = vec![beta.iter().copied().collect::<Vec<_>>()];
    let mut converged = false;
    let mut iterations = 0;
    let mut warm: Option<Vec<f64>> = None;

    for _ in 0..config.max_iter {
        iterations += 1;
        let resid: Vec<f64> = (&design.y - &design.x * &beta).iter().copied().collect();
        let tf = match config.variance_criterion {
            VarianceCriterion::Ml => fit_theta_mle_from(&resid, &v, &vm, config, warm.as_deref(), config.seed)?,
            VarianceCriterion::Reml => {
                fit_theta_reml_from(&resid, &v, &design.x, &vm, config, warm.as_deref(), config.seed)?
            }
        };
        vm = tf.model;
        warm = Some(vm.theta.clone());
        let w: Vec<f64> = v.iter().map(|&vi| 1.0 / vm.g(vi).powi(2)).collect();
        let beta_new = fit_wls(&design.x, &design.y, &w)?;
        let change = beta_change(beta.as_slice(), beta_new.as_slice());
        beta = beta_new;
        trace.push(beta.iter().copied().collect());
        v = index_of(&beta);
        if change < config.beta_rel_tol {
            converged = true;
            break;
        }
    }

    let beta_vec: Vec<f64> = beta.iter().copied().collect();
    let loglik = loglik_independent(design, &beta_vec, &vm)?;
    let n_params = design.p() + vm.n_params();
    let (aic, bic) = information_criteria(loglik, n_params, n);
    let mean: Vec<f64> = (&design.x * &beta).iter().copied().collect();
    let residuals: Vec<f64> = design.y.iter().zip(&mean).map(|(y, m)| y - m).collect();

    // known-variance GLS covariance at the final weights
    let mut xw = design.x.clone();
    for (i, &vi) in v.iter().enumerate() {
        xw.row_mut(i).scale_mut(1.0 / vm.g(vi));
    }
    let info = xw.transpose() * &xw;
    let cov = info
        .try_inverse()
        .ok_or_else(|| GcaError::RankDeficient("X' W X is singular".into()))?;
    let beta_se_model = (0..design.p()).map(|j| cov[(j, j)].sqrt()).collect();

    Ok(FitResult {
        beta_hat: beta_vec,
        column_names: design.column_names.clone(),
        re_cov: RandomEffectsCov::zero(0),
        variance: vm,
        blups: vec![],
        residuals,
        fitted_marginal_mean: mean.clone(),
        fitted_conditional_mean: mean,
        fitted_index: v,
        loglik,
        aic,
        bic,
        n_params,
        n_units: n,
        n_iterations: iterations,
        converged,
        beta_trace: trace,
        beta_se_model,
    })
}

struct ClusteredState {
    marginal: Vec<f64>,
    conditional: Vec<f64>,
}

fn clustered_means(design: &ClusteredDesign, beta: &[f64], blups: &[Vec<f64>]) -> ClusteredState {
    let bv = DVector::from_column_slice(beta);
    let mut marginal = Vec::with_capacity(design.n_obs());
    let mut conditional = Vec::with_capacity(design.n_obs());
    for (s, b) in design.subjects.iter().zip(blups) {
        let m = &s.x * &bv;
        let c = if design.q() > 0 {
            &m + &s.z * DVector::from_column_slice(b)
        } else {
            m.clone()
        };
        marginal.extend(m.iter());
        conditional.extend(c.iter());
    }
    ClusteredState {
        marginal,
        conditional,
    }
}

fn clustered_index(kind: IndexKind, design: &ClusteredDesign, st: &ClusteredState) -> Vec<f64> {
    match kind {
        IndexKind::Time => design.stacked_t(),
        IndexKind::MarginalMean => st.marginal.clone(),
        IndexKind::ConditionalMean => st.conditional.clone(),
    }
}

/// Iteratively reweighted fit of the heteroscedastic mixed model.
pub fn irw_fit_clustered(
    design: &ClusteredDesign,
    template: &VarianceTemplate,
    config: &IrwConfig,
) -> Result<FitResult> {
    config.validate()?;
    let n_obs = design.n_obs();
    let y = design.stacked_y();
    let mut fit = fit_lmm_ml(design, &vec![1.0; n_obs])?;
    let mut st = clustered_means(design, &fit.beta, &fit.blups);
    let mut v = clustered_index(template.index_kind, design, &st);
    let (lo, hi) = min_max(&v);
    let mut vm = template.build(lo, hi)?;
    let mut trace = vec![fit.beta.clone()];
    let mut converged = false;
    let mut iterations = 0;
    // the naive fit expressed in the template's coordinates
    let mut warm: Option<Vec<f64>> = {
        let mut gamma = vec![0.0; vm.n_params()];
        gamma[0] = fit.sigma2.sqrt();
        Some(vm.box_to_theta(&gamma))
    };

    for _ in 0..config.max_iter {
        iterations += 1;
        let tf = fit_theta_clustered(
            design,
            &fit.beta,
            &fit.re_cov,
            &v,
            &vm,
            config,
            warm.as_deref(),
            config.seed,
        )?;
        vm = tf.model;
        let weights: Vec<f64> = v.iter().map(|&vi| 1.0 / vm.g(vi)).collect();
        let new_fit = fit_lmm_ml_from(design, &weights, Some(&fit.alpha_rel))?;
        // fold the profiled scale back so g stays on the scale of B
        vm = vm.scaled(new_fit.sigma2.sqrt());
        warm = Some(vm.theta.clone());
        let change = beta_change(&fit.beta, &new_fit.beta);
        fit = new_fit;
        trace.push(fit.beta.clone());
        st = clustered_means(design, &fit.beta, &fit.blups);
        v = clustered_index(template.index_kind, design, &st);
        if change < config.beta_rel_tol {
            converged = true;
            break;
        }
    }

    let loglik = match template.index_kind {
        IndexKind::ConditionalMean => {
            loglik_conditional_variance(design, &fit.beta, &fit.re_cov, &vm, config.n_quad)?
        }
        _ => loglik_marginal_variance(design, &fit.beta, &fit.re_cov, &vm)?,
    };
    let n_params = design.p() + RandomEffectsCov::dim(design.q()) + vm.n_params();
    let (aic, bic) = information_criteria(loglik, n_params, design.n_subjects());
    let residuals: Vec<f64> = y.iter().zip(&st.conditional).map(|(a, b)| a - b).collect();
    let beta_se_model = (0..design.p()).map(|j| fit.beta_cov[(j, j)].sqrt()).collect();

    Ok(FitResult {
        beta_hat: fit.beta,
        column_names: design.column_names.clone(),
        re_cov: fit.re_cov,
        variance: vm,
        blups: fit.blups,
        residuals,
        fitted_marginal_mean: st.marginal,
        fitted_conditional_mean: st.conditional,
        fitted_index: v,
        loglik,
        aic,
        bic,
        n_params,
        n_units: design.n_subjects(),
        n_iterations: iterations,
        converged,
        beta_trace: trace,
        beta_se_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SubjectBlock;
    use crate::spline::SplineFamily;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn independent_data(n: usize, seed: u64, sd: impl Fn(f64) -> f64) -> IndependentDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let mut x = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let xi: f64 = rng.random_range(0.0..2.0);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = xi;
            let mu = 1.0 + 0.5 * xi;
            y.push(mu + sd(mu) * z.sample(&mut rng));
        }
        let t = vec![0.0; n];
        IndependentDesign::new(y, x, t).unwrap()
    }

    fn clustered_data(m: usize, q: usize, seed: u64) -> ClusteredDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let subjects = (0..m)
            .map(|i| {
                let n = 3 + i % 4;
                let mut x = DMatrix::zeros(n, 2);
                let mut zm = DMatrix::zeros(n, q);
                let b0 = 0.6 * z.sample(&mut rng);
                let b1 = 0.2 * z.sample(&mut rng);
                let mut y = Vec::with_capacity(n);
                let mut t = Vec::with_capacity(n);
                for j in 0..n {
                    let tj = j as f64;
                    x[(j, 0)] = 1.0;
                    x[(j, 1)] = tj;
                    if q >= 1 {
                        zm[(j, 0)] = 1.0;
                    }
                    if q >= 2 {
                        zm[(j, 1)] = tj;
                    }
                    let mu = 2.0 + 0.3 * tj + b0 + if q >= 2 { b1 * tj } else { 0.0 };
                    y.push(mu + 0.4 * (1.0 + 0.2 * tj) * z.sample(&mut rng));
                    t.push(tj);
                }
                SubjectBlock::new(format!("s{i}"), y, x, zm, t)
            })
            .collect();
        ClusteredDesign::new(subjects).unwrap()
    }

    #[test]
    fn wls_matches_normal_equations() {
        let d = independent_data(50, 1, |_| 1.0);
        let w: Vec<f64> = (0..50).map(|i| 0.5 + (i % 7) as f64).collect();
        let beta = fit_wls(&d.x, &d.y, &w).unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
        let a = d.x.transpose() * &wm * &d.x;
        let b = d.x.transpose() * &wm * &d.y;
        let oracle = a.try_inverse().unwrap() * b;
        for j in 0..2 {
            assert_abs_diff_eq!(beta[j], oracle[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn wls_rejects_bad_weights() {
        let d = independent_data(10, 1, |_| 1.0);
        let mut w = vec![1.0; 10];
        w[3] = 0.0;
        assert!(fit_wls(&d.x, &d.y, &w).is_err());
    }

    /// Dense GLS with the full covariance `Z B Z' + sigma^2 diag(1/w^2)`.
    fn dense_gls(d: &ClusteredDesign, w: &[f64], b: &DMatrix<f64>, sigma2: f64) -> (Vec<f64>, f64) {
        let x = d.stacked_x();
        let y = DVector::from_vec(d.stacked_y());
        let n = d.n_obs();
        let mut v = DMatrix::zeros(n, n);
        let mut pos = 0;
        for s in &d.subjects {
            let blk = &s.z * b * s.z.transpose();
            for i in 0..s.n() {
                for j in 0..s.n() {
                    v[(pos + i, pos + j)] = blk[(i, j)];
                }
                v[(pos + i, pos + i)] += sigma2 / (w[pos + i] * w[pos + i]);
            }
            pos += s.n();
        }
        let vinv = v.clone().try_inverse().unwrap();
        let a = x.transpose() * &vinv * &x;
        let beta = a.try_inverse().unwrap() * x.transpose() * &vinv * &y;
        let r = &y - &x * &beta;
        let logdet = v.determinant().ln();
        let ll = -0.5 * (n as f64 * LN_2PI + logdet + r.dot(&(&vinv * &r)));
        (beta.iter().copied().collect(), ll)
    }

    #[test]
    fn lmm_matches_dense_gls_and_likelihood() {
        for q in [1, 2] {
            let d = clustered_data(30, q, 7 + q as u64);
            let w: Vec<f64> = d.stacked_t().iter().map(|t| 1.0 / (1.0 + 0.2 * t)).collect();
            let fit = fit_lmm_ml(&d, &w).unwrap();
            assert!(fit.converged);
            let (beta, ll) = dense_gls(&d, &w, &fit.re_cov.cov(), fit.sigma2);
            for j in 0..2 {
                assert_abs_diff_eq!(fit.beta[j], beta[j], epsilon = 1e-8);
            }
            assert_abs_diff_eq!(fit.loglik, ll, epsilon = 1e-7);

            // same number through the model-level likelihood
            let spec = SplineSpec::even(SplineFamily::I, 1, 1, 0.0, 10.0).unwrap();
            let vm = VarianceModel::new(
                VarianceShape::IncreasingI,
                Some(spec),
                vec![fit.sigma2.sqrt(), fit.sigma2.sqrt() * 2.0],
                IndexKind::Time,
            )
            .unwrap();
            let ll_model = loglik_marginal_variance(&d, &fit.beta, &fit.re_cov, &vm).unwrap();
            assert_abs_diff_eq!(fit.loglik, ll_model, epsilon = 1e-7);
        }
    }

    #[test]
    fn lmm_is_a_local_maximum() {
        let d = clustered_data(25, 2, 3);
        let w = vec![1.0; d.n_obs()];
        let fit = fit_lmm_ml(&d, &w).unwrap();
        for k in 0..fit.alpha_rel.len() {
            for h in [-0.05, 0.05] {
                let mut a = fit.alpha_rel.clone();
                a[k] += h;
                let (_, _, ll) = lmm_profile_at(&d, &w, &a).unwrap();
                assert!(ll <= fit.loglik + 1e-9, "perturbation {k} {h} improves");
            }
        }
    }

    #[test]
    fn lmm_weight_scale_invariance() {
        let d = clustered_data(20, 1, 11);
        let w: Vec<f64> = (0..d.n_obs()).map(|i| 0.5 + (i % 3) as f64 * 0.25).collect();
        let w7: Vec<f64> = w.iter().map(|v| v * 7.0).collect();
        let a = fit_lmm_ml(&d, &w).unwrap();
        let b = fit_lmm_ml(&d, &w7).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(a.beta[j], b.beta[j], epsilon = 1e-8);
        }
        assert_abs_diff_eq!(a.loglik, b.loglik, epsilon = 1e-9);
        assert_abs_diff_eq!(a.re_cov.cov()[(0, 0)], b.re_cov.cov()[(0, 0)], epsilon = 1e-8);
        assert_abs_diff_eq!(b.sigma2 / a.sigma2, 49.0, epsilon = 1e-7);
    }

    #[test]
    fn lmm_without_random_effects_is_wls() {
        let d = clustered_data(20, 0, 5);
        let w: Vec<f64> = (0..d.n_obs()).map(|i| 1.0 + (i % 5) as f64 * 0.1).collect();
        let fit = fit_lmm_ml(&d, &w).unwrap();
        let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
        let y = DVector::from_vec(d.stacked_y());
        let beta = fit_wls(&d.stacked_x(), &y, &w2).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(fit.beta[j], beta[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn theta_constant_is_root_mean_square() {
        let e = [0.3, -1.2, 0.5, 2.0];
        let vm = VarianceModel::constant(1.0, IndexKind::MarginalMean);
        let fit = fit_theta_mle(&e, &[0.0; 4], &vm, &IrwConfig::default()).unwrap();
        let rms = (e.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        assert_abs_diff_eq!(fit.model.theta[0], rms, epsilon = 1e-14);
    }

    #[test]
    fn basis_without_data_support_stays_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Normal::new(0.0, 1.0).unwrap();
        // data only in the lower half of the knot range
        let v: Vec<f64> = (0..200).map(|i| 0.4 * i as f64 / 199.0).collect();
        let e: Vec<f64> = v.iter().map(|vi| (0.5 + vi) * z.sample(&mut rng)).collect();
        let vm = VarianceTemplate::increasing(2, 6, IndexKind::Time).build(0.0, 1.0).unwrap();
        let fit = fit_theta_mle(&e, &v, &vm, &IrwConfig::default()).unwrap();
        let spec = fit.model.spec.clone().unwrap();
        let knots = spec.knot_sequence();
        for (k, th) in fit.model.theta.iter().enumerate().skip(1) {
            // theta[k] multiplies basis k - 1, which starts rising at knot k - 1
            if knots[k - 1] >= 0.4 {
                assert_eq!(*th, 0.0, "theta[{k}] = {th}");
            }
        }
        assert!(fit.model.g(1.0) < 10.0);
    }

    #[test]
    fn g_floor_scales_with_residuals() {
        // one residual of exactly zero at the lowest index value would pull g to zero there
        let mut e: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        e[0] = 0.0;
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let vm = VarianceTemplate::increasing(2, 4, IndexKind::Time).build(0.0, 1.0).unwrap();
        let fit = fit_theta_mle(&e, &v, &vm, &IrwConfig::default()).unwrap();
        let rms = (e.iter().map(|x| x * x).sum::<f64>() / 100.0).sqrt();
        assert!(fit.model.g(0.0) >= THETA_REL_FLOOR * rms * (1.0 - 1e-12));
    }

    #[test]
    fn reml_constant_variance_is_ols_scale() {
        let d = independent_data(40, 5, |_| 0.7);
        let beta = fit_wls(&d.x, &d.y, &[1.0; 40]).unwrap();
        let resid: Vec<f64> = (&d.y - &d.x * &beta).iter().copied().collect();
        let rss: f64 = resid.iter().map(|e| e * e).sum();
        let vm = VarianceModel::constant(1.0, IndexKind::Time);
        let fit = fit_theta_reml_from(&resid, &d.t, &d.x, &vm, &IrwConfig::default(), None, 1).unwrap();
        assert_abs_diff_eq!(fit.model.theta[0], (rss / 38.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn reml_step_matches_grid_search() {
        let d = independent_data(120, 6, |mu| 0.2 + 0.5 * (mu - 1.0));
        let beta = fit_wls(&d.x, &d.y, &[1.0; 120]).unwrap();
        let resid: Vec<f64> = (&d.y - &d.x * &beta).iter().copied().collect();
        let v: Vec<f64> = (&d.x * &beta).iter().copied().collect();
        let (lo, hi) = min_max(&v);
        let spec = SplineSpec::even(SplineFamily::I, 1, 1, lo, hi).unwrap();
        let vm = VarianceModel::new(VarianceShape::IncreasingI, Some(spec), vec![1.0, 0.0], IndexKind::MarginalMean)
            .unwrap();
        let fit = fit_theta_reml_from(&resid, &v, &d.x, &vm, &IrwConfig::default(), None, 1).unwrap();
        let objective = |t0: f64, t1: f64| -> f64 {
            let g: Vec<f64> = v.iter().map(|vi| t0 + t1 * (vi - lo) / (hi - lo)).collect();
            let w = DMatrix::from_diagonal(&DVector::from_iterator(120, g.iter().map(|gi| 1.0 / (gi * gi))));
            let a = d.x.transpose() * w * &d.x;
            let ll: f64 = g.iter().zip(&resid).map(|(gi, e)| gi.ln() + 0.5 * e * e / (gi * gi)).sum();
            ll + 0.5 * a.determinant().ln()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 1..=150 {
            for j in 0..=150 {
                let (t0, t1) = (i as f64 * 0.005, j as f64 * 0.01);
                let f = objective(t0, t1);
                if f < best.0 {
                    best = (f, t0, t1);
                }
            }
        }
        assert!((fit.model.theta[0] - best.1).abs() <= 0.005, "{:?} vs {:?}", fit.model.theta, best);
        assert!((fit.model.theta[1] - best.2).abs() <= 0.01, "{:?} vs {:?}", fit.model.theta, best);
        // the restricted criterion inflates g relative to ML
        let ml = fit_theta_mle(&resid, &v, &vm, &IrwConfig::default()).unwrap();
        assert!(fit.model.g(lo) + fit.model.g(hi) > ml.model.g(lo) + ml.model.g(hi));
    }

    #[test]
    fn theta_single_basis_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Normal::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..300).map(|i| i as f64 / 299.0).collect();
        let e: Vec<f64> = v.iter().map(|vi| (0.5 + 1.5 * vi) * z.sample(&mut rng)).collect();
        let spec = SplineSpec::even(SplineFamily::I, 1, 1, 0.0, 1.0).unwrap();
        let vm = VarianceModel::new(VarianceShape::IncreasingI, Some(spec), vec![1.0, 0.0], IndexKind::Time)
            .unwrap();
        let fit = fit_theta_mle(&e, &v, &vm, &IrwConfig::default()).unwrap();
        let nll = |t0: f64, t1: f64| -> f64 {
            v.iter()
                .zip(&e)
                .map(|(vi, ei)| {
                    let g = t0 + t1 * vi;
                    g.ln() + 0.5 * ei * ei / (g * g)
                })
                .sum()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 1..=300 {
            for j in 0..=300 {
                let (t0, t1) = (i as f64 * 0.01, j as f64 * 0.01);
                let f = nll(t0, t1);
                if f < best.0 {
                    best = (f, t0, t1);
                }
            }
        }
        assert!((fit.model.theta[0] - best.1).abs() <= 0.01);
        assert!((fit.model.theta[1] - best.2).abs() <= 0.01);
        assert!(fit.objective <= best.0 + 1e-9);
    }

    #[test]
    fn theta_is_consistent_for_a_large_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Normal::new(0.0, 1.0).unwrap();
        let spec = SplineSpec::even(SplineFamily::I, 2, 3, 0.0, 2.0).unwrap();
        let truth = VarianceModel::new(
            VarianceShape::IncreasingI,
            Some(spec),
            vec![0.2, 0.3, 0.1, 0.5],
            IndexKind::Time,
        )
        .unwrap();
        let v: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..2.0)).collect();
        let e: Vec<f64> = v.iter().map(|&vi| truth.g(vi) * z.sample(&mut rng)).collect();
        let fit = fit_theta_mle(&e, &v, &truth, &IrwConfig::default()).unwrap();
        for vi in truth.grid(50) {
            assert!((fit.model.g(vi) - truth.g(vi)).abs() < 0.15 * truth.g(vi));
        }
    }

    #[test]
    fn every_shape_respects_its_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Normal::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..3.0)).collect();
        // deliberately non-monotone truth so constraints bind
        let e: Vec<f64> = v
            .iter()
            .map(|vi| (0.3 + (vi - 1.5_f64).powi(2) * 0.4) * z.sample(&mut rng))
            .collect();
        let shapes = [
            (VarianceShape::IncreasingI, SplineFamily::I),
            (VarianceShape::DecreasingI, SplineFamily::I),
            (VarianceShape::ConvexC, SplineFamily::C),
            (VarianceShape::ConcaveC, SplineFamily::C),
            (VarianceShape::IncreasingConcaveC, SplineFamily::C),
        ];
        for (shape, family) in shapes {
            let spec = SplineSpec::even(family, 2, 4, 0.0, 3.0).unwrap();
            let n = 1 + usize::from(shape.has_linear_term()) + 4;
            let mut theta = vec![0.0; n];
            theta[0] = 1.0;
            let vm = VarianceModel::new(shape, Some(spec), theta, IndexKind::Time).unwrap();
            let fit = fit_theta_mle(&e, &v, &vm, &IrwConfig::default()).unwrap();
            assert!(fit.model.satisfies_constraints(1e-10), "{shape:?}");
            let g: Vec<f64> = fit.model.grid(POSITIVITY_GRID).iter().map(|&x| fit.model.g(x)).collect();
            let d1: Vec<f64> = g.windows(2).map(|w| w[1] - w[0]).collect();
            let d2: Vec<f64> = d1.windows(2).map(|w| w[1] - w[0]).collect();
            match shape {
                VarianceShape::IncreasingI => assert!(d1.iter().all(|d| *d >= -1e-12)),
                VarianceShape::DecreasingI => assert!(d1.iter().all(|d| *d <= 1e-12)),
                VarianceShape::ConvexC => assert!(d2.iter().all(|d| *d >= -1e-10)),
                VarianceShape::ConcaveC => assert!(d2.iter().all(|d| *d <= 1e-10)),
                VarianceShape::IncreasingConcaveC => {
                    assert!(d1.iter().all(|d| *d >= -1e-12));
                    assert!(d2.iter().all(|d| *d <= 1e-10));
                }
                VarianceShape::Constant => unreachable!(),
            }
        }
    }

    #[test]
    fn constant_irw_equals_plain_lmm() {
        let d = clustered_data(30, 1, 21);
        let fit = irw_fit_clustered(&d, &VarianceTemplate::constant(IndexKind::MarginalMean), &IrwConfig::default())
            .unwrap();
        let naive = fit_lmm_ml(&d, &vec![1.0; d.n_obs()]).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(fit.beta_hat[j], naive.beta[j], epsilon = 1e-8);
        }
        assert_abs_diff_eq!(fit.loglik, naive.loglik, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.theta_hat()[0], naive.sigma2.sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn irw_independent_recovers_truth() {
        let d = independent_data(1000, 3, |mu| 0.2 + 0.3 * (mu - 1.0));
        let t = VarianceTemplate::increasing(2, 3, IndexKind::MarginalMean);
        let fit = irw_fit_independent(&d, &t, &IrwConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta_hat[0] - 1.0).abs() < 0.05);
        assert!((fit.beta_hat[1] - 0.5).abs() < 0.05);
        assert!(fit.variance.satisfies_constraints(1e-10));
        let bad = VarianceTemplate::increasing(2, 3, IndexKind::ConditionalMean);
        assert!(matches!(
            irw_fit_independent(&d, &bad, &IrwConfig::default()),
            Err(GcaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn irw_clustered_runs_for_each_index_kind() {
        let d = clustered_data(40, 1, 8);
        for kind in [IndexKind::Time, IndexKind::MarginalMean, IndexKind::ConditionalMean] {
            let t = VarianceTemplate::increasing(2, 3, kind);
            let fit = irw_fit_clustered(&d, &t, &IrwConfig::default()).unwrap();
            assert!(fit.converged, "{kind:?}");
            assert!(fit.loglik.is_finite());
            assert_eq!(fit.n_params, 2 + 1 + 4);
        }
    }

    #[test]
    fn clustered_theta_step_without_random_effects_is_independent_mle() {
        let d = clustered_data(40, 1, 13);
        let fit = fit_lmm_ml(&d, &vec![1.0; d.n_obs()]).unwrap();
        let t = d.stacked_t();
        let spec = SplineSpec::even(SplineFamily::I, 2, 3, 0.0, 5.0).unwrap();
        let vm = VarianceModel::new(VarianceShape::IncreasingI, Some(spec), vec![1.0, 0.0, 0.0, 0.0], IndexKind::Time)
            .unwrap();
        let cfg = IrwConfig::default();
        let zero = RandomEffectsCov::zero(1);
        let a = fit_theta_clustered(&d, &fit.beta, &zero, &t, &vm, &cfg, None, 5).unwrap();
        let bv = DVector::from_column_slice(&fit.beta);
        let resid: Vec<f64> = (DVector::from_vec(d.stacked_y()) - d.stacked_x() * bv).iter().copied().collect();
        let b = fit_theta_mle_from(&resid, &t, &vm, &cfg, None, 5).unwrap();
        for v in vm.grid(20) {
            assert_abs_diff_eq!(a.model.g(v), b.model.g(v), epsilon = 1e-6);
        }
    }

    #[test]
    fn clustered_theta_step_maximizes_the_marginal_likelihood() {
        for q in [1, 2] {
            let d = clustered_data(40, q, 17 + q as u64);
            let fit = fit_lmm_ml(&d, &vec![1.0; d.n_obs()]).unwrap();
            let t = d.stacked_t();
            let spec = SplineSpec::even(SplineFamily::I, 2, 3, 0.0, 5.0).unwrap();
            let vm = VarianceModel::new(VarianceShape::IncreasingI, Some(spec), vec![1.0, 0.0, 0.0, 0.0], IndexKind::Time)
                .unwrap();
            let tf = fit_theta_clustered(&d, &fit.beta, &fit.re_cov, &t, &vm, &IrwConfig::default(), None, 5).unwrap();
            let best = loglik_marginal_variance(&d, &fit.beta, &fit.re_cov, &tf.model).unwrap();
            // objective is the negative log-likelihood without the 2 pi terms
            assert_abs_diff_eq!(-tf.objective - 0.5 * d.n_obs() as f64 * LN_2PI, best, epsilon = 1e-8);
            for k in 0..tf.model.theta.len() {
                for h in [-1e-3, 1e-3] {
                    let mut other = tf.model.clone();
                    other.theta[k] = (other.theta[k] + h).max(if k == 0 { G_FLOOR } else { 0.0 });
                    let ll = loglik_marginal_variance(&d, &fit.beta, &fit.re_cov, &other).unwrap();
                    assert!(ll <= best + 1e-9, "q {q} theta {k} step {h}: {ll} > {best}");
                }
            }
        }
    }
}
