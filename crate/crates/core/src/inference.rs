//! Parametric bootstrap, variance-curve bands, model selection, reference
//! quantile curves and residual diagnostics.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{GcaError, Result};
use crate::fitting::{irw_fit, Design, IrwConfig, VarianceTemplate};
use crate::model::{ClusteredDesign, FitResult, IndependentDesign, IndexKind, VarianceModel};

/// SplitMix64 finalizer; spreads a (seed, stream) pair into an independent seed.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Template that refits with the same variance shape and spline size as `fit`.
pub fn template_of(fit: &FitResult) -> VarianceTemplate {
    let vm = &fit.variance;
    VarianceTemplate {
        shape: vm.shape,
        degree: vm.spec.as_ref().map_or(0, |s| s.degree),
        df: vm.n_basis(),
        index_kind: vm.index_kind,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_rep: usize,
    pub seed: u64,
    /// Coverage of the percentile intervals and of the variance band.
    pub level: f64,
    pub grid_points: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_rep: 200,
            seed: 20230501,
            level: 0.95,
            grid_points: 101,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub variance: Option<VarianceModel>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: Vec<Replicate>,
    pub n_used: usize,
    pub n_dropped: usize,
    pub se_beta: Vec<f64>,
    pub se_alpha: Vec<f64>,
    pub se_theta: Vec<f64>,
    pub ci_beta: Vec<(f64, f64)>,
    pub level: f64,
    pub band_grid: Vec<f64>,
    pub g_band_lower: Vec<f64>,
    pub g_band_upper: Vec<f64>,
    pub seed: u64,
    pub n_replicates: usize,
}

impl BootstrapSummary {
    fn used(&self) -> impl Iterator<Item = &Replicate> {
        self.replicates.iter().filter(|r| r.converged)
    }
}

/// Draws one response vector from the fitted clustered model.
pub fn simulate_clustered_response(fit: &FitResult, design: &ClusteredDesign, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let beta = DVector::from_column_slice(&fit.beta_hat);
    let l = fit.re_cov.cholesky_factor();
    let q = design.q();
    let vm = &fit.variance;
    let mut y = Vec::with_capacity(design.n_obs());
    for s in &design.subjects {
        let u: DVector<f64> = DVector::from_fn(q, |_, _| StandardNormal.sample(rng));
        let b = &l * u;
        let marginal = &s.x * &beta;
        let conditional = if q > 0 { &marginal + &s.z * &b } else { marginal.clone() };
        for j in 0..s.n() {
            let v = match vm.index_kind {
                IndexKind::Time => s.t[j],
                IndexKind::MarginalMean => marginal[j],
                IndexKind::ConditionalMean => conditional[j],
            };
            let e: f64 = StandardNormal.sample(rng);
            y.push(conditional[j] + vm.g(v) * e);
        }
    }
    y
}

/// Draws one response vector from the fitted independent-data model.
pub fn simulate_independent_response(
    fit: &FitResult,
    design: &IndependentDesign,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mean = &design.x * DVector::from_column_slice(&fit.beta_hat);
    let vm = &fit.variance;
    (0..design.n())
        .map(|i| {
            let v = match vm.index_kind {
                IndexKind::Time => design.t[i],
                _ => mean[i],
            };
            let e: f64 = StandardNormal.sample(rng);
            mean[i] + vm.g(v) * e
        })
        .collect()
}

fn run_replicate(fit: &FitResult, design: &Design, irw: &IrwConfig, seed: u64, r: usize) -> Replicate {
    let rep_seed = split_seed(seed, r as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    let star = match design {
        Design::Clustered(d) => Design::Clustered(d.with_response(&simulate_clustered_response(fit, d, &mut rng))),
        Design::Independent(d) => Design::Independent(d.with_response(simulate_independent_response(fit, d, &mut rng))),
    };
    let cfg = IrwConfig {
        seed: split_seed(rep_seed, 0xB00),
        ..irw.clone()
    };
    match irw_fit(&star, &template_of(fit), &cfg) {
        Ok(f) => Replicate {
            index: r,
            alpha: f.re_cov.alpha.clone(),
            theta: f.variance.theta.clone(),
            converged: f.converged && f.beta_hat.iter().all(|b| b.is_finite()),
            beta: f.beta_hat,
            variance: Some(f.variance),
        },
        Err(e) => {
            log::debug!("bootstrap replicate {r} failed: {e}");
            Replicate {
                index: r,
                beta: vec![],
                alpha: vec![],
                theta: vec![],
                variance: None,
                converged: false,
            }
        }
    }
}

/// Parametric bootstrap of an IRW fit. Replicates run in parallel; replicate `r`
/// depends only on `(seed, r)`.
pub fn bootstrap(fit: &FitResult, design: &Design, irw: &IrwConfig, config: &BootstrapConfig) -> Result<BootstrapSummary> {
    if config.n_rep == 0 {
        return Err(GcaError::InvalidArgument("n_rep must be at least 1".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(GcaError::InvalidArgument("level must lie in (0, 1)".into()));
    }
    let replicates: Vec<Replicate> = (0..config.n_rep)
        .into_par_iter()
        .map(|r| run_replicate(fit, design, irw, config.seed, r))
        .collect();
    summarize(fit, replicates, config)
}

pub fn bootstrap_clustered(
    fit: &FitResult,
    design: &ClusteredDesign,
    irw: &IrwConfig,
    config: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    bootstrap(fit, &Design::Clustered(design.clone()), irw, config)
}

pub fn bootstrap_independent(
    fit: &FitResult,
    design: &IndependentDesign,
    irw: &IrwConfig,
    config: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    bootstrap(fit, &Design::Independent(design.clone()), irw, config)
}

fn summarize(fit: &FitResult, replicates: Vec<Replicate>, config: &BootstrapConfig) -> Result<BootstrapSummary> {
    let n_rep = replicates.len();
    let used: Vec<&Replicate> = replicates.iter().filter(|r| r.converged).collect();
    let n_used = used.len();
    let n_dropped = n_rep - n_used;
    if n_dropped as f64 > 0.05 * n_rep as f64 {
        log::warn!("{n_dropped} of {n_rep} bootstrap replicates did not converge and were dropped");
    }
    let column = |get: &dyn Fn(&Replicate) -> &[f64], len: usize| -> Vec<Vec<f64>> {
        (0..len)
            .map(|j| used.iter().map(|r| get(r)[j]).collect())
            .collect()
    };
    let p = fit.beta_hat.len();
    let beta_cols = column(&|r| &r.beta, p);
    let alpha_cols = column(&|r| &r.alpha, fit.re_cov.alpha.len());
    let theta_cols = column(&|r| &r.theta, fit.variance.theta.len());
    let tail = 0.5 * (1.0 - config.level);
    let ci_beta = beta_cols
        .iter()
        .map(|c| {
            if c.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let mut s = c.clone();
            s.sort_by(f64::total_cmp);
            (quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail))
        })
        .collect();
    let band_grid = fit.variance.grid(config.grid_points.max(2));
    let mut summary = BootstrapSummary {
        se_beta: beta_cols.iter().map(|c| sample_sd(c)).collect(),
        se_alpha: alpha_cols.iter().map(|c| sample_sd(c)).collect(),
        se_theta: theta_cols.iter().map(|c| sample_sd(c)).collect(),
        replicates,
        n_used,
        n_dropped,
        ci_beta,
        level: config.level,
        band_grid: band_grid.clone(),
        g_band_lower: vec![],
        g_band_upper: vec![],
        seed: config.seed,
        n_replicates: n_rep,
    };
    if n_used > 0 {
        let (lo, hi) = variance_band(&summary, &band_grid)?;
        summary.g_band_lower = lo;
        summary.g_band_upper = hi;
    }
    Ok(summary)
}

/// Pointwise percentile envelope of the replicate variance curves.
pub fn variance_band(summary: &BootstrapSummary, grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let curves: Vec<&VarianceModel> = summary.used().filter_map(|r| r.variance.as_ref()).collect();
    if curves.is_empty() {
        return Err(GcaError::EmptyReplicates);
    }
    let tail = 0.5 * (1.0 - summary.level);
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    let mut values = vec![0.0; curves.len()];
    for &v in grid {
        for (slot, vm) in values.iter_mut().zip(&curves) {
            *slot = vm.g(v);
        }
        values.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&values, tail));
        upper.push(quantile_sorted(&values, 1.0 - tail));
    }
    Ok((lower, upper))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateResult {
    pub template: VarianceTemplate,
    /// Size of the mean-model spline when the mean model is part of the search.
    pub mean_df: Option<usize>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<CandidateResult>,
    pub winner_aic: usize,
    pub winner_bic: usize,
}

fn index_rank(kind: IndexKind) -> u8 {
    match kind {
        IndexKind::Time => 0,
        IndexKind::MarginalMean => 1,
        IndexKind::ConditionalMean => 2,
    }
}

fn tie_break(a: &CandidateResult, b: &CandidateResult) -> Ordering {
    a.mean_df
        .cmp(&b.mean_df)
        .then(a.template.df.cmp(&b.template.df))
        .then(a.template.degree.cmp(&b.template.degree))
        .then(index_rank(a.template.index_kind).cmp(&index_rank(b.template.index_kind)))
}

fn winner(cands: &[CandidateResult], crit: impl Fn(&CandidateResult) -> f64) -> Option<usize> {
    (0..cands.len())
        .filter(|&i| cands[i].converged && crit(&cands[i]).is_finite())
        .min_by(|&i, &j| {
            crit(&cands[i])
                .total_cmp(&crit(&cands[j]))
                .then_with(|| tie_break(&cands[i], &cands[j]))
        })
}

/// Fits every candidate variance model and ranks them by AIC and BIC.
pub fn select_model(design: &Design, candidates: &[VarianceTemplate], irw: &IrwConfig) -> Result<SelectionReport> {
    let jobs: Vec<(&Design, VarianceTemplate, Option<usize>)> =
        candidates.iter().map(|t| (design, *t, None)).collect();
    select_over(&jobs, irw)
}

/// Like [`select_model`], with each candidate carrying its own design (for
/// searches that also vary the mean-model spline).
pub fn select_over(jobs: &[(&Design, VarianceTemplate, Option<usize>)], irw: &IrwConfig) -> Result<SelectionReport> {
    if jobs.is_empty() {
        return Err(GcaError::InvalidArgument("empty candidate grid".into()));
    }
    let candidates: Vec<CandidateResult> = jobs
        .par_iter()
        .map(|(design, template, mean_df)| match irw_fit(design, template, irw) {
            Ok(f) => CandidateResult {
                template: *template,
                mean_df: *mean_df,
                loglik: f.loglik,
                aic: f.aic,
                bic: f.bic,
                n_params: f.n_params,
                converged: f.converged,
                error: None,
            },
            Err(e) => CandidateResult {
                template: *template,
                mean_df: *mean_df,
                loglik: f64::NAN,
                aic: f64::NAN,
                bic: f64::NAN,
                n_params: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let winner_aic = winner(&candidates, |c| c.aic).ok_or(GcaError::AllCandidatesFailed)?;
    let winner_bic = winner(&candidates, |c| c.bic).ok_or(GcaError::AllCandidatesFailed)?;
    Ok(SelectionReport {
        candidates,
        winner_aic,
        winner_bic,
    })
}

/// Design rows of one group (e.g. one diet) along the time grid.
#[derive(Debug, Clone)]
pub struct CurveGroup {
    pub name: String,
    pub t: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCurves {
    pub name: String,
    pub t: Vec<f64>,
    pub probs: Vec<f64>,
    /// `quantiles[k][j]`: quantile `probs[k]` at `t[j]`.
    pub quantiles: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Simulates `n_draws` new individuals per group and returns pointwise quantiles.
pub fn quantile_curves(
    fit: &FitResult,
    groups: &[CurveGroup],
    n_draws: usize,
    probs: &[f64],
    seed: u64,
) -> Result<Vec<GroupCurves>> {
    if probs.is_empty() || probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(GcaError::InvalidArgument("probabilities must lie in (0, 1)".into()));
    }
    if n_draws == 0 {
        return Err(GcaError::InvalidArgument("n_draws must be positive".into()));
    }
    let beta = DVector::from_column_slice(&fit.beta_hat);
    let l = fit.re_cov.cholesky_factor();
    let vm = &fit.variance;
    groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let q = g.z.ncols();
            if q != fit.re_cov.q || g.x.ncols() != beta.len() || g.x.nrows() != g.t.len() {
                return Err(GcaError::DimensionMismatch(format!("curve group {}", g.name)));
            }
            let n_t = g.t.len();
            let mean = &g.x * &beta;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, gi as u64));
            let mut draws = vec![Vec::with_capacity(n_draws); n_t];
            for _ in 0..n_draws {
                let u: DVector<f64> = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
                let cond = if q > 0 { &mean + &g.z * (&l * u) } else { mean.clone() };
                for j in 0..n_t {
                    let v = match vm.index_kind {
                        IndexKind::Time => g.t[j],
                        IndexKind::MarginalMean => mean[j],
                        IndexKind::ConditionalMean => cond[j],
                    };
                    let e: f64 = StandardNormal.sample(&mut rng);
                    draws[j].push(cond[j] + vm.g(v) * e);
                }
            }
            let mut quantiles = vec![vec![0.0; n_t]; probs.len()];
            for (j, d) in draws.iter_mut().enumerate() {
                d.sort_by(f64::total_cmp);
                for (k, &p) in probs.iter().enumerate() {
                    quantiles[k][j] = quantile_sorted(d, p);
                }
            }
            Ok(GroupCurves {
                name: g.name.clone(),
                t: g.t.clone(),
                probs: probs.to_vec(),
                quantiles,
                mean: mean.iter().copied().collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Residuals divided by the fitted SD, in data order.
    pub standardized: Vec<f64>,
    /// `(normal quantile, ordered standardized residual)` pairs.
    pub qq: Vec<(f64, f64)>,
}

pub fn standardize(residuals: &[f64], index: &[f64], vm: &VarianceModel) -> Diagnostics {
    let standardized: Vec<f64> = residuals.iter().zip(index).map(|(e, &v)| e / vm.g(v)).collect();
    let mut sorted = standardized.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let normal = Normal::standard();
    let qq = sorted
        .iter()
        .enumerate()
        .map(|(i, &s)| (normal.inverse_cdf((i as f64 + 0.5) / n), s))
        .collect();
    Diagnostics { standardized, qq }
}

pub fn residual_diagnostics(fit: &FitResult) -> Diagnostics {
    standardize(&fit.residuals, &fit.fitted_index, &fit.variance)
}

/// Pearson correlation of the Q-Q pairs.
pub fn qq_correlation(d: &Diagnostics) -> f64 {
    let n = d.qq.len() as f64;
    let (mx, my) = d.qq.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &d.qq {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IndexKind, VarianceShape};
    use crate::spline::{SplineFamily, SplineSpec};
    use approx::assert_abs_diff_eq;

    fn dummy_fit(theta: Vec<f64>) -> FitResult {
        let spec = SplineSpec::even(SplineFamily::I, 1, 1, 0.0, 1.0).unwrap();
        let vm = VarianceModel::new(VarianceShape::IncreasingI, Some(spec), theta, IndexKind::Time).unwrap();
        FitResult {
            beta_hat: vec![0.0],
            column_names: vec!["a".into()],
            re_cov: crate::model::RandomEffectsCov::zero(0),
            variance: vm,
            blups: vec![],
            residuals: vec![],
            fitted_marginal_mean: vec![],
            fitted_conditional_mean: vec![],
            fitted_index: vec![],
            loglik: 0.0,
            aic: 0.0,
            bic: 0.0,
            n_params: 3,
            n_units: 1,
            n_iterations: 1,
            converged: true,
            beta_trace: vec![],
            beta_se_model: vec![],
        }
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_abs_diff_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_abs_diff_eq!(quantile_sorted(&s, 1.0), 4.0);
    }

    #[test]
    fn single_replicate_band_is_that_curve() {
        let fit = dummy_fit(vec![1.0, 2.0]);
        let rep = Replicate {
            index: 0,
            beta: vec![0.1],
            alpha: vec![],
            theta: vec![1.0, 2.0],
            variance: Some(fit.variance.clone()),
            converged: true,
        };
        let s = summarize(&fit, vec![rep], &BootstrapConfig::default()).unwrap();
        for (i, &v) in s.band_grid.iter().enumerate() {
            assert_abs_diff_eq!(s.g_band_lower[i], 1.0 + 2.0 * v, epsilon = 1e-12);
            assert_abs_diff_eq!(s.g_band_upper[i], s.g_band_lower[i]);
        }
        assert_eq!(s.se_beta, vec![0.0]);
    }

    #[test]
    fn dropped_replicates_do_not_count() {
        let fit = dummy_fit(vec![1.0, 2.0]);
        let good = |b: f64| Replicate {
            index: 0,
            beta: vec![b],
            alpha: vec![],
            theta: vec![1.0, 2.0],
            variance: Some(fit.variance.clone()),
            converged: true,
        };
        let mut bad = good(1e6);
        bad.converged = false;
        let s = summarize(&fit, vec![good(1.0), bad, good(3.0)], &BootstrapConfig::default()).unwrap();
        assert_eq!((s.n_used, s.n_dropped), (2, 1));
        assert_abs_diff_eq!(s.se_beta[0], 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn empty_band_is_an_error() {
        let fit = dummy_fit(vec![1.0, 2.0]);
        let s = summarize(&fit, vec![], &BootstrapConfig::default()).unwrap();
        assert!(matches!(variance_band(&s, &[0.5]), Err(GcaError::EmptyReplicates)));
    }

    #[test]
    fn standardization_examples() {
        let vm = VarianceModel::constant(2.0, IndexKind::MarginalMean);
        let d = standardize(&[2.0, -2.0], &[0.0, 0.0], &vm);
        assert_eq!(d.standardized, vec![1.0, -1.0]);
        assert!(d.qq[0].0 < 0.0 && d.qq[1].0 > 0.0);
    }

    #[test]
    fn winners_ignore_order_and_break_ties() {
        let mk = |df: usize, kind: IndexKind, aic: f64| CandidateResult {
            template: VarianceTemplate::increasing(2, df, kind),
            mean_df: None,
            loglik: -aic,
            aic,
            bic: aic,
            n_params: 1,
            converged: true,
            error: None,
        };
        let a = vec![
            mk(5, IndexKind::MarginalMean, 10.0),
            mk(3, IndexKind::ConditionalMean, 10.0),
            mk(3, IndexKind::MarginalMean, 10.0),
            mk(4, IndexKind::MarginalMean, 9.0),
        ];
        assert_eq!(winner(&a, |c| c.aic), Some(3));
        let mut b = a.clone();
        b.remove(3);
        let w = winner(&b, |c| c.aic).unwrap();
        assert_eq!(b[w].template.df, 3);
        assert_eq!(b[w].template.index_kind, IndexKind::MarginalMean);
        let mut c = b.clone();
        c.reverse();
        let w2 = winner(&c, |c| c.aic).unwrap();
        assert_eq!(c[w2].template, b[w].template);
    }
}
