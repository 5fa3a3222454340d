//! Combined treatment-effect estimators over matched pairs and reservoir.
//!
//! Both estimators blend a pair-based estimate and a reservoir-based
//! estimate with inverse-variance weights. The classic form uses the mean
//! pair difference and the reservoir two-sample mean difference; the OLS form
//! uses the intercept of a regression of pair differences on covariate
//! differences and the treatment coefficient of a reservoir regression.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Arm, TrialSplit};
use crate::numstat::{mean, ols, sum_sq_dev, NumError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("misaligned sample: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

/// Within-pair response differences and covariate differences, both taken
/// treatment minus control.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub differences: Vec<f64>,
    /// `m x p`
    pub diff_covariates: DMatrix<f64>,
}

impl PairedSample {
    pub fn new(differences: Vec<f64>, diff_covariates: DMatrix<f64>) -> Result<Self, EstimatorError> {
        if diff_covariates.nrows() != differences.len() {
            return Err(EstimatorError::Misaligned(format!(
                "{} differences but {} covariate rows",
                differences.len(),
                diff_covariates.nrows()
            )));
        }
        Ok(Self {
            differences,
            diff_covariates,
        })
    }

    /// Pairs without covariates.
    pub fn from_differences(differences: Vec<f64>) -> Self {
        let m = differences.len();
        Self {
            differences,
            diff_covariates: DMatrix::zeros(m, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.differences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.differences.is_empty()
    }

    pub fn p(&self) -> usize {
        self.diff_covariates.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirSample {
    pub responses_t: Vec<f64>,
    pub responses_c: Vec<f64>,
    pub covariates_t: DMatrix<f64>,
    pub covariates_c: DMatrix<f64>,
}

impl ReservoirSample {
    pub fn new(
        responses_t: Vec<f64>,
        responses_c: Vec<f64>,
        covariates_t: DMatrix<f64>,
        covariates_c: DMatrix<f64>,
    ) -> Result<Self, EstimatorError> {
        if covariates_t.nrows() != responses_t.len() || covariates_c.nrows() != responses_c.len() {
            return Err(EstimatorError::Misaligned("reservoir covariate rows".into()));
        }
        if covariates_t.ncols() != covariates_c.ncols() {
            return Err(EstimatorError::Misaligned("reservoir covariate widths differ".into()));
        }
        Ok(Self {
            responses_t,
            responses_c,
            covariates_t,
            covariates_c,
        })
    }

    pub fn from_responses(responses_t: Vec<f64>, responses_c: Vec<f64>) -> Self {
        let (nt, nc) = (responses_t.len(), responses_c.len());
        Self {
            responses_t,
            responses_c,
            covariates_t: DMatrix::zeros(nt, 0),
            covariates_c: DMatrix::zeros(nc, 0),
        }
    }

    pub fn empty(p: usize) -> Self {
        Self {
            responses_t: Vec::new(),
            responses_c: Vec::new(),
            covariates_t: DMatrix::zeros(0, p),
            covariates_c: DMatrix::zeros(0, p),
        }
    }

    pub fn n_t(&self) -> usize {
        self.responses_t.len()
    }

    pub fn n_c(&self) -> usize {
        self.responses_c.len()
    }

    pub fn len(&self) -> usize {
        self.n_t() + self.n_c()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_difference(&self) -> f64 {
        mean(&self.responses_t) - mean(&self.responses_c)
    }

    /// Whether the pooled variance is estimable under the fallback rule
    /// (at least two subjects in each arm).
    pub fn variance_estimable(&self) -> bool {
        self.n_t() >= 2 && self.n_c() >= 2
    }
}

/// Builds the two samples from a finished (or interim) split, given a
/// response for every listed subject.
pub fn samples_from_split(
    split: &TrialSplit,
    response: impl Fn(u64) -> Option<f64>,
) -> Result<(PairedSample, ReservoirSample), EstimatorError> {
    let p = split
        .pairs
        .first()
        .map(|(t, _)| t.covariates.len())
        .or_else(|| split.reservoir.first().map(|s| s.covariates.len()))
        .unwrap_or(0);
    let lookup = |id: u64| {
        response(id).ok_or_else(|| EstimatorError::InsufficientData(format!("no response for subject {id}")))
    };
    let mut diffs = Vec::with_capacity(split.pairs.len());
    let mut dx = Vec::with_capacity(split.pairs.len() * p);
    for (t, c) in &split.pairs {
        diffs.push(lookup(t.id)? - lookup(c.id)?);
        dx.extend(t.covariates.iter().zip(&c.covariates).map(|(a, b)| a - b));
    }
    let pairs = PairedSample::new(diffs, DMatrix::from_row_slice(split.pairs.len(), p, &dx))?;
    let (mut yt, mut yc, mut xt, mut xc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &split.reservoir {
        let y = lookup(s.id)?;
        match s.arm {
            Arm::Treatment => {
                yt.push(y);
                xt.extend_from_slice(&s.covariates);
            }
            Arm::Control => {
                yc.push(y);
                xc.extend_from_slice(&s.covariates);
            }
        }
    }
    let (nt, nc) = (yt.len(), yc.len());
    let reservoir = ReservoirSample::new(
        yt,
        yc,
        DMatrix::from_row_slice(nt, p, &xt),
        DMatrix::from_row_slice(nc, p, &xc),
    )?;
    Ok((pairs, reservoir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    ClassicCombined,
    PairsOnly,
    ReservoirOnly,
    OlsCombined,
    OlsPairsOnly,
    OlsReservoirOnly,
}

impl EstimateMethod {
    pub fn is_ols(self) -> bool {
        matches!(
            self,
            EstimateMethod::OlsCombined | EstimateMethod::OlsPairsOnly | EstimateMethod::OlsReservoirOnly
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Weight on the pair component; 1 for pair-only, 0 for reservoir-only.
    pub weight_pairs: f64,
    pub component_pairs: Option<f64>,
    pub component_reservoir: Option<f64>,
    pub variance_pairs: Option<f64>,
    pub variance_reservoir: Option<f64>,
    pub method: EstimateMethod,
    /// Matched pairs used.
    pub pairs: usize,
    /// Residual df of the pair component (`m - 1` for the classic form).
    pub df_pairs: Option<usize>,
    pub df_reservoir: Option<usize>,
}

/// Inverse-variance combination `(v_r a + v_p b) / (v_r + v_p)` and its
/// standard error `sqrt(v_r v_p / (v_r + v_p))`.
///
/// Returns `(estimate, std_error, weight_on_a)`. When both variances are
/// zero the components are averaged with zero standard error.
pub fn inverse_variance_combine(a: f64, var_a: f64, b: f64, var_b: f64) -> (f64, f64, f64) {
    let total = var_a + var_b;
    if total <= 0.0 {
        return (0.5 * (a + b), 0.0, 0.5);
    }
    let w = var_b / total;
    let est = (var_b * a + var_a * b) / total;
    (est, (var_a * var_b / total).sqrt(), w)
}

/// Variance of the mean pair difference, `sum (D - mean)^2 / (m (m - 1))`.
pub fn pair_variance(differences: &[f64]) -> Result<f64, EstimatorError> {
    let m = differences.len();
    if m < 2 {
        return Err(EstimatorError::InsufficientData(format!("pair variance needs m >= 2, got {m}")));
    }
    Ok(sum_sq_dev(differences) / (m * (m - 1)) as f64)
}

/// Pooled two-sample variance of the reservoir mean difference.
pub fn reservoir_variance(r: &ReservoirSample) -> Result<f64, EstimatorError> {
    let (nt, nc) = (r.n_t(), r.n_c());
    if nt < 1 || nc < 1 || nt + nc < 3 {
        return Err(EstimatorError::InsufficientData(format!(
            "reservoir variance needs both arms and n_R >= 3 (got {nt} T, {nc} C)"
        )));
    }
    let ss = sum_sq_dev(&r.responses_t) + sum_sq_dev(&r.responses_c);
    Ok(ss / (nt + nc - 2) as f64 * (1.0 / nt as f64 + 1.0 / nc as f64))
}

pub fn classic_combined(pairs: &PairedSample, reservoir: &ReservoirSample) -> Result<EffectEstimate, EstimatorError> {
    let m = pairs.len();
    let use_pairs = m >= 2;
    let use_reservoir = reservoir.variance_estimable();
    let pair_part = if use_pairs {
        Some((mean(&pairs.differences), pair_variance(&pairs.differences)?))
    } else {
        None
    };
    let res_part = if use_reservoir {
        Some((reservoir.mean_difference(), reservoir_variance(reservoir)?))
    } else {
        None
    };
    let df_pairs = use_pairs.then(|| m - 1);
    let df_reservoir = use_reservoir.then(|| reservoir.len() - 2);
    combine(
        pair_part,
        res_part,
        [
            EstimateMethod::ClassicCombined,
            EstimateMethod::PairsOnly,
            EstimateMethod::ReservoirOnly,
        ],
        m,
        df_pairs,
        df_reservoir,
    )
}

fn combine(
    pair_part: Option<(f64, f64)>,
    res_part: Option<(f64, f64)>,
    methods: [EstimateMethod; 3],
    m: usize,
    df_pairs: Option<usize>,
    df_reservoir: Option<usize>,
) -> Result<EffectEstimate, EstimatorError> {
    let base = EffectEstimate {
        estimate: f64::NAN,
        std_error: f64::NAN,
        weight_pairs: f64::NAN,
        component_pairs: pair_part.map(|c| c.0),
        component_reservoir: res_part.map(|c| c.0),
        variance_pairs: pair_part.map(|c| c.1),
        variance_reservoir: res_part.map(|c| c.1),
        method: methods[0],
        pairs: m,
        df_pairs,
        df_reservoir,
    };
    match (pair_part, res_part) {
        (Some((d, vd)), Some((r, vr))) => {
            let (estimate, std_error, weight_pairs) = inverse_variance_combine(d, vd, r, vr);
            Ok(EffectEstimate {
                estimate,
                std_error,
                weight_pairs,
                ..base
            })
        }
        (Some((d, vd)), None) => Ok(EffectEstimate {
            estimate: d,
            std_error: vd.sqrt(),
            weight_pairs: 1.0,
            method: methods[1],
            ..base
        }),
        (None, Some((r, vr))) => Ok(EffectEstimate {
            estimate: r,
            std_error: vr.sqrt(),
            weight_pairs: 0.0,
            method: methods[2],
            ..base
        }),
        (None, None) => Err(EstimatorError::InsufficientData(
            "neither matched pairs nor reservoir supports a variance estimate".into(),
        )),
    }
}

/// Minimum residual df required of each regression before the OLS form uses
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OlsOptions {
    pub min_pair_df: usize,
    pub min_reservoir_df: usize,
}

impl Default for OlsOptions {
    fn default() -> Self {
        Self {
            min_pair_df: 1,
            min_reservoir_df: 1,
        }
    }
}

/// Intercept and its variance from regressing differences on `[1, dx]`.
pub fn pair_regression(pairs: &PairedSample) -> Result<(f64, f64, usize), EstimatorError> {
    let (m, p) = (pairs.len(), pairs.p());
    let design = DMatrix::from_fn(m, p + 1, |i, j| if j == 0 { 1.0 } else { pairs.diff_covariates[(i, j - 1)] });
    let fit = ols(&design, &pairs.differences)?;
    Ok((fit.coefficients[0], fit.coefficient_variances[0], fit.df_residual))
}

/// Treatment coefficient and its variance from regressing reservoir
/// responses on `[1_T, 1, x]`.
pub fn reservoir_regression(r: &ReservoirSample) -> Result<(f64, f64, usize), EstimatorError> {
    let (nt, n, p) = (r.n_t(), r.len(), r.covariates_t.ncols());
    let design = DMatrix::from_fn(n, p + 2, |i, j| match j {
        0 => f64::from(u8::from(i < nt)),
        1 => 1.0,
        _ if i < nt => r.covariates_t[(i, j - 2)],
        _ => r.covariates_c[(i - nt, j - 2)],
    });
    let y: Vec<f64> = r.responses_t.iter().chain(&r.responses_c).copied().collect();
    let fit = ols(&design, &y)?;
    Ok((fit.coefficients[0], fit.coefficient_variances[0], fit.df_residual))
}

pub fn ols_combined(pairs: &PairedSample, reservoir: &ReservoirSample) -> Result<EffectEstimate, EstimatorError> {
    ols_combined_with(pairs, reservoir, OlsOptions::default())
}

pub fn ols_combined_with(
    pairs: &PairedSample,
    reservoir: &ReservoirSample,
    opts: OlsOptions,
) -> Result<EffectEstimate, EstimatorError> {
    let p = pairs.p().max(reservoir.covariates_t.ncols());
    let m = pairs.len();
    let pair_part = if m >= p + 1 + opts.min_pair_df {
        let (b, v, df) = pair_regression(pairs)?;
        Some((b, v, df))
    } else {
        None
    };
    let res_part = if reservoir.variance_estimable() && reservoir.len() >= p + 2 + opts.min_reservoir_df {
        let (b, v, df) = reservoir_regression(reservoir)?;
        Some((b, v, df))
    } else {
        None
    };
    combine(
        pair_part.map(|(b, v, _)| (b, v)),
        res_part.map(|(b, v, _)| (b, v)),
        [
            EstimateMethod::OlsCombined,
            EstimateMethod::OlsPairsOnly,
            EstimateMethod::OlsReservoirOnly,
        ],
        m,
        pair_part.map(|c| c.2),
        res_part.map(|c| c.2),
    )
}

/// Point estimate that degrades to whatever component is available, for
/// permutation statistics where a variance may be unestimable.
///
/// Follows the same ladder as [`classic_combined`], additionally allowing a
/// lone pair mean or a reservoir mean difference without variance.
pub fn classic_point(pairs: &[f64], yt: &[f64], yc: &[f64]) -> Option<f64> {
    let m = pairs.len();
    let res_point = (!yt.is_empty() && !yc.is_empty()).then(|| mean(yt) - mean(yc));
    let res_var_ok = yt.len() >= 2 && yc.len() >= 2;
    if m >= 2 && res_var_ok {
        let r = ReservoirSample::from_responses(yt.to_vec(), yc.to_vec());
        let vd = sum_sq_dev(pairs) / (m * (m - 1)) as f64;
        let vr = reservoir_variance(&r).ok()?;
        return Some(inverse_variance_combine(mean(pairs), vd, res_point?, vr).0);
    }
    if m == 0 {
        return res_point;
    }
    if !res_var_ok || m >= 2 {
        return Some(mean(pairs));
    }
    // single pair next to an estimable reservoir
    res_point
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(d: &[f64]) -> PairedSample {
        PairedSample::from_differences(d.to_vec())
    }

    fn res(t: &[f64], c: &[f64]) -> ReservoirSample {
        ReservoirSample::from_responses(t.to_vec(), c.to_vec())
    }

    #[test]
    fn substitution_example() {
        let (est, se, w) = inverse_variance_combine(2.0, 1.0, 4.0, 3.0);
        assert!((est - 2.5).abs() < 1e-15);
        assert!((se - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((w - 0.75).abs() < 1e-15);
        let (est, _, w) = inverse_variance_combine(1.0, 2.0, 3.0, 2.0);
        assert_eq!((est, w), (2.0, 0.5));
    }

    #[test]
    fn pair_variance_examples() {
        assert_eq!(pair_variance(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(pair_variance(&[0.0, 2.0]).unwrap(), 1.0);
        let base = [0.3, -1.2, 2.5, 0.9];
        let scaled: Vec<f64> = base.iter().map(|d| 3.0 * d).collect();
        assert!((pair_variance(&scaled).unwrap() - 9.0 * pair_variance(&base).unwrap()).abs() < 1e-12);
        assert!(pair_variance(&[1.0]).is_err());
    }

    #[test]
    fn reservoir_variance_examples() {
        assert_eq!(reservoir_variance(&res(&[2.0, 2.0], &[5.0, 5.0, 5.0])).unwrap(), 0.0);
        assert_eq!(reservoir_variance(&res(&[0.0, 2.0], &[1.0, 3.0])).unwrap(), 2.0);
        let a = reservoir_variance(&res(&[0.1, 2.0, 4.4], &[1.0, 3.0])).unwrap();
        let b = reservoir_variance(&res(&[1.0, 3.0], &[0.1, 2.0, 4.4])).unwrap();
        assert_eq!(a, b);
        assert!(reservoir_variance(&res(&[1.0], &[2.0])).is_err());
        assert!(reservoir_variance(&res(&[], &[2.0, 3.0, 4.0])).is_err());
    }

    #[test]
    fn classic_fallbacks() {
        // one reservoir treatment -> pairs only
        let est = classic_combined(&pairs(&[1.0, 3.0, 2.0]), &res(&[5.0], &[1.0, 2.0])).unwrap();
        assert_eq!(est.method, EstimateMethod::PairsOnly);
        assert_eq!(est.estimate, 2.0);
        assert!((est.std_error - pair_variance(&[1.0, 3.0, 2.0]).unwrap().sqrt()).abs() < 1e-15);
        // no pairs -> reservoir only
        let est = classic_combined(&pairs(&[]), &res(&[0.0, 2.0], &[1.0, 3.0])).unwrap();
        assert_eq!(est.method, EstimateMethod::ReservoirOnly);
        assert_eq!(est.estimate, -1.0);
        assert_eq!(est.std_error, 2.0f64.sqrt());
        assert!(classic_combined(&pairs(&[1.0]), &res(&[1.0], &[2.0])).is_err());
    }

    #[test]
    fn classic_combined_weights() {
        // D = (1, 3): mean 2, S2 = 1; reservoir T = (4, 6), C = (0, 2): diff 4, S2 = 2
        let est = classic_combined(&pairs(&[1.0, 3.0]), &res(&[4.0, 6.0], &[0.0, 2.0])).unwrap();
        assert_eq!(est.method, EstimateMethod::ClassicCombined);
        assert!((est.estimate - (2.0 * 2.0 + 1.0 * 4.0) / 3.0).abs() < 1e-14);
        assert!((est.std_error - (2.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((est.weight_pairs - 2.0 / 3.0).abs() < 1e-14);
        assert_eq!(est.df_pairs, Some(1));
    }

    #[test]
    fn ols_substitution_and_reduction() {
        let (est, se, _) = inverse_variance_combine(1.0, 2.0, 3.0, 2.0);
        assert_eq!((est, se), (2.0, 1.0));
        let p = pairs(&[1.0, 3.0, 2.5, -0.5]);
        let r = res(&[4.0, 6.0, 5.5], &[0.0, 2.0, 1.0]);
        let a = classic_combined(&p, &r).unwrap();
        let b = ols_combined(&p, &r).unwrap();
        assert_eq!(b.method, EstimateMethod::OlsCombined);
        assert!((a.estimate - b.estimate).abs() < 1e-10);
        assert!((a.std_error - b.std_error).abs() < 1e-10);
    }

    #[test]
    fn ols_fallbacks() {
        // p = 2: pairs need m >= 4, reservoir needs n_R >= 5
        let dx = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.5, 0.0, 1.0]);
        let few = PairedSample::new(vec![1.0, 2.0, 3.0], dx).unwrap();
        let r = ReservoirSample::new(
            vec![1.0, 2.0, 3.5],
            vec![0.0, 0.4, 1.0],
            DMatrix::from_row_slice(3, 2, &[0.1, 1.0, 0.4, -1.0, 2.0, 0.3]),
            DMatrix::from_row_slice(3, 2, &[0.7, 0.1, -0.5, 0.2, 1.1, 0.9]),
        )
        .unwrap();
        let est = ols_combined(&few, &r).unwrap();
        assert_eq!(est.method, EstimateMethod::OlsReservoirOnly);
        assert_eq!(est.df_reservoir, Some(2));
        assert!(ols_combined(&few, &ReservoirSample::empty(2)).is_err());
    }

    #[test]
    fn classic_point_ladder() {
        assert_eq!(classic_point(&[3.0], &[], &[]), Some(3.0));
        assert_eq!(classic_point(&[], &[10.0, 11.0], &[0.0, 1.0]), Some(10.0));
        assert_eq!(classic_point(&[2.0, 4.0], &[9.0], &[1.0]), Some(3.0));
        assert_eq!(classic_point(&[], &[1.0], &[]), None);
        let full = classic_combined(&pairs(&[1.0, 3.0]), &res(&[4.0, 6.0], &[0.0, 2.0])).unwrap();
        assert_eq!(classic_point(&[1.0, 3.0], &[4.0, 6.0], &[0.0, 2.0]), Some(full.estimate));
    }

    proptest! {
        #[test]
        fn combined_se_below_components(
            d in prop::collection::vec(-5.0f64..5.0, 2..12),
            t in prop::collection::vec(-5.0f64..5.0, 2..8),
            c in prop::collection::vec(-5.0f64..5.0, 2..8),
            shift in -10.0f64..10.0,
        ) {
            let est = classic_combined(&pairs(&d), &res(&t, &c)).unwrap();
            let (vd, vr) = (est.variance_pairs.unwrap(), est.variance_reservoir.unwrap());
            prop_assert!(est.std_error <= vd.sqrt().min(vr.sqrt()) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&est.weight_pairs));
            // shifting every treatment response shifts the estimate
            let d2: Vec<f64> = d.iter().map(|x| x + shift).collect();
            let t2: Vec<f64> = t.iter().map(|x| x + shift).collect();
            let moved = classic_combined(&pairs(&d2), &res(&t2, &c)).unwrap();
            prop_assert!((moved.estimate - est.estimate - shift).abs() < 1e-9);
            let ols_a = ols_combined(&pairs(&d), &res(&t, &c)).unwrap();
            let ols_b = ols_combined(&pairs(&d2), &res(&t2, &c)).unwrap();
            prop_assert!((ols_b.estimate - ols_a.estimate - shift).abs() < 1e-9);
        }
    }
}
