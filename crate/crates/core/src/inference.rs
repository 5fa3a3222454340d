//! Tests of `H0: beta_T = beta0` for the combined estimators.
//!
//! The exact test permutes according to the allocation structure: every
//! matched pair may have its labels swapped, and reservoir labels are
//! reassigned holding the number of reservoir treatments fixed.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{
    classic_point, inverse_variance_combine, ols_combined, EffectEstimate, EstimatorError, PairedSample,
    ReservoirSample,
};
use crate::numstat::{normal_cdf, t_cdf, NumError};

pub const DEFAULT_MC_DRAWS: u64 = 1000;
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;
const MC_CHUNK: u64 = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("standard error is zero; z statistic undefined")]
    ZeroStandardError,
    #[error("{configs} configurations exceed the enumeration cap {cap}")]
    TooManyConfigurations { configs: u128, cap: u64 },
    #[error("no configuration yields a statistic: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ClassicZ,
    OlsZ,
    ExactMc,
    ExactFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_draws: Option<u64>,
    /// Size of the enumerated configuration space (full mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configurations: Option<u64>,
}

impl TestResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// Reference law for the standardized statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZReference {
    #[default]
    Normal,
    /// Student t with the pair component's residual df (reservoir df when
    /// there are no usable pairs); more conservative in small samples.
    StudentT,
}

pub fn z_test(est: &EffectEstimate, beta0: f64) -> Result<TestResult, InferenceError> {
    z_test_with(est, beta0, ZReference::Normal)
}

pub fn z_test_with(est: &EffectEstimate, beta0: f64, reference: ZReference) -> Result<TestResult, InferenceError> {
    if !(est.std_error > 0.0) {
        return Err(InferenceError::ZeroStandardError);
    }
    let statistic = (est.estimate - beta0) / est.std_error;
    let upper = match reference {
        ZReference::Normal => 1.0 - normal_cdf(statistic.abs()),
        ZReference::StudentT => {
            let df = est.df_pairs.or(est.df_reservoir).unwrap_or(1).max(1);
            1.0 - t_cdf(statistic.abs(), df as u32)?
        }
    };
    let method = if est.method.is_ols() {
        TestMethod::OlsZ
    } else {
        TestMethod::ClassicZ
    };
    Ok(TestResult {
        statistic,
        p_value: (2.0 * upper).clamp(0.0, 1.0),
        method,
        mc_draws: None,
        configurations: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ExactMode {
    /// Uniform draws from the configuration space, p-value
    /// `(1 + #exceed) / (1 + draws)`.
    MonteCarlo { draws: u64, seed: u64 },
    /// Every configuration, observed included.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactStatistic {
    #[default]
    Classic,
    Ols,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOptions {
    pub mode: ExactMode,
    pub statistic: ExactStatistic,
    pub enumeration_cap: u64,
}

impl ExactOptions {
    pub fn monte_carlo(draws: u64, seed: u64) -> Self {
        Self {
            mode: ExactMode::MonteCarlo { draws, seed },
            statistic: ExactStatistic::Classic,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    pub fn full() -> Self {
        Self {
            mode: ExactMode::Full,
            statistic: ExactStatistic::Classic,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    pub fn with_statistic(mut self, statistic: ExactStatistic) -> Self {
        self.statistic = statistic;
        self
    }
}

/// Number of configurations `2^m * C(n_R, n_RT)`.
pub fn configuration_count(m: usize, n_r: usize, n_rt: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..n_rt.min(n_r - n_rt) {
        c = c * (n_r - i) as u128 / (i + 1) as u128;
    }
    c.saturating_mul(1u128.checked_shl(m as u32).unwrap_or(u128::MAX))
}

/// Centered data plus precomputed sums for fast classic statistics.
struct PermutationFrame {
    diffs: Vec<f64>,
    diff_cov: DMatrix<f64>,
    /// Reservoir responses, treatment block first.
    responses: Vec<f64>,
    covariates: DMatrix<f64>,
    n_rt: usize,
    sum_sq_diffs: f64,
    total: f64,
    total_sq: f64,
}

impl PermutationFrame {
    fn new(pairs: &PairedSample, reservoir: &ReservoirSample, beta0: f64) -> Self {
        let diffs: Vec<f64> = pairs.differences.iter().map(|d| d - beta0).collect();
        let responses: Vec<f64> = reservoir
            .responses_t
            .iter()
            .map(|y| y - beta0)
            .chain(reservoir.responses_c.iter().copied())
            .collect();
        let p = reservoir.covariates_t.ncols();
        let n_r = responses.len();
        let n_rt = reservoir.n_t();
        let covariates = DMatrix::from_fn(n_r, p, |i, j| {
            if i < n_rt {
                reservoir.covariates_t[(i, j)]
            } else {
                reservoir.covariates_c[(i - n_rt, j)]
            }
        });
        Self {
            sum_sq_diffs: diffs.iter().map(|d| d * d).sum(),
            total: responses.iter().sum(),
            total_sq: responses.iter().map(|y| y * y).sum(),
            diffs,
            diff_cov: pairs.diff_covariates.clone(),
            responses,
            covariates,
            n_rt,
        }
    }

    fn m(&self) -> usize {
        self.diffs.len()
    }

    fn n_r(&self) -> usize {
        self.responses.len()
    }

    /// Classic statistic from sufficient sums; matches
    /// [`classic_point`] on the materialized configuration.
    fn classic_stat(&self, signs: &[bool], treated: &[usize]) -> Option<f64> {
        let m = self.m();
        let signed_sum: f64 = self
            .diffs
            .iter()
            .zip(signs)
            .map(|(d, &flip)| if flip { -d } else { *d })
            .sum();
        let n_t = treated.len();
        let n_c = self.n_r() - n_t;
        let (sum_t, sq_t) = treated.iter().fold((0.0, 0.0), |(s, q), &i| {
            let y = self.responses[i];
            (s + y, q + y * y)
        });
        let res_point = (n_t > 0 && n_c > 0).then(|| sum_t / n_t as f64 - (self.total - sum_t) / n_c as f64);
        let res_var_ok = n_t >= 2 && n_c >= 2;
        let pair_mean = signed_sum / m.max(1) as f64;
        if m >= 2 && res_var_ok {
            let vd = (self.sum_sq_diffs - m as f64 * pair_mean * pair_mean).max(0.0) / (m * (m - 1)) as f64;
            let ss_t = (sq_t - sum_t * sum_t / n_t as f64).max(0.0);
            let sum_c = self.total - sum_t;
            let ss_c = ((self.total_sq - sq_t) - sum_c * sum_c / n_c as f64).max(0.0);
            let vr = (ss_t + ss_c) / (n_t + n_c - 2) as f64 * (1.0 / n_t as f64 + 1.0 / n_c as f64);
            return Some(inverse_variance_combine(pair_mean, vd, res_point?, vr).0);
        }
        if m == 0 {
            return res_point;
        }
        if !res_var_ok || m >= 2 {
            return Some(pair_mean);
        }
        res_point
    }

    fn materialize(&self, signs: &[bool], treated: &[usize]) -> (PairedSample, ReservoirSample) {
        let p = self.diff_cov.ncols();
        let sign = |k: usize| if signs[k] { -1.0 } else { 1.0 };
        let diffs = (0..self.m()).map(|k| sign(k) * self.diffs[k]).collect();
        let dx = DMatrix::from_fn(self.m(), p, |k, j| sign(k) * self.diff_cov[(k, j)]);
        let mut is_t = vec![false; self.n_r()];
        for &i in treated {
            is_t[i] = true;
        }
        let rp = self.covariates.ncols();
        let (mut yt, mut yc, mut xt, mut xc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.n_r() {
            let row = self.covariates.row(i);
            if is_t[i] {
                yt.push(self.responses[i]);
                xt.extend(row.iter());
            } else {
                yc.push(self.responses[i]);
                xc.extend(row.iter());
            }
        }
        let (nt, nc) = (yt.len(), yc.len());
        (
            PairedSample {
                differences: diffs,
                diff_covariates: dx,
            },
            ReservoirSample {
                responses_t: yt,
                responses_c: yc,
                covariates_t: DMatrix::from_row_slice(nt, rp, &xt),
                covariates_c: DMatrix::from_row_slice(nc, rp, &xc),
            },
        )
    }

    fn stat(&self, kind: ExactStatistic, signs: &[bool], treated: &[usize]) -> Option<f64> {
        match kind {
            ExactStatistic::Classic => self.classic_stat(signs, treated),
            ExactStatistic::Ols => {
                let (pairs, res) = self.materialize(signs, treated);
                match ols_combined(&pairs, &res) {
                    Ok(est) => Some(est.estimate),
                    Err(_) => classic_point(&pairs.differences, &res.responses_t, &res.responses_c),
                }
            }
        }
    }
}

fn exceeds(stat: f64, observed_abs: f64) -> bool {
    stat.abs() >= observed_abs - 1e-10 * observed_abs.max(1.0)
}

/// Conditional permutation test of `H0: beta_T = beta0`.
///
/// Treatment responses (and pair differences) are centered at `beta0` so
/// the null is a sharp additive one.
pub fn exact_test(
    pairs: &PairedSample,
    reservoir: &ReservoirSample,
    beta0: f64,
    opts: ExactOptions,
) -> Result<TestResult, InferenceError> {
    let frame = PermutationFrame::new(pairs, reservoir, beta0);
    let (m, n_r, n_rt) = (frame.m(), frame.n_r(), frame.n_rt);
    let identity_signs = vec![false; m];
    let identity_treated: Vec<usize> = (0..n_rt).collect();
    let observed = frame
        .stat(opts.statistic, &identity_signs, &identity_treated)
        .ok_or_else(|| InferenceError::Degenerate("observed data give no statistic".into()))?;
    let observed_abs = observed.abs();

    match opts.mode {
        ExactMode::Full => {
            let total = configuration_count(m, n_r, n_rt);
            if total > u128::from(opts.enumeration_cap) {
                return Err(InferenceError::TooManyConfigurations {
                    configs: total,
                    cap: opts.enumeration_cap,
                });
            }
            let subsets = combinations(n_r, n_rt);
            let exceed: u64 = (0..1u64 << m)
                .into_par_iter()
                .map(|mask| {
                    let signs: Vec<bool> = (0..m).map(|k| mask >> k & 1 == 1).collect();
                    subsets
                        .iter()
                        .filter(|treated| {
                            frame
                                .stat(opts.statistic, &signs, treated)
                                .is_some_and(|s| exceeds(s, observed_abs))
                        })
                        .count() as u64
                })
                .sum();
            Ok(TestResult {
                statistic: observed,
                p_value: exceed as f64 / total as f64,
                method: TestMethod::ExactFull,
                mc_draws: None,
                configurations: Some(total as u64),
            })
        }
        ExactMode::MonteCarlo { draws, seed } => {
            let chunks = draws.div_ceil(MC_CHUNK);
            let exceed: u64 = (0..chunks)
                .into_par_iter()
                .map(|chunk| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(chunk);
                    let len = MC_CHUNK.min(draws - chunk * MC_CHUNK);
                    let mut signs = vec![false; m];
                    let mut hits = 0;
                    for _ in 0..len {
                        for s in signs.iter_mut() {
                            *s = rng.random::<bool>();
                        }
                        let treated = sample(&mut rng, n_r, n_rt).into_vec();
                        if frame
                            .stat(opts.statistic, &signs, &treated)
                            .is_some_and(|s| exceeds(s, observed_abs))
                        {
                            hits += 1;
                        }
                    }
                    hits
                })
                .sum();
            Ok(TestResult {
                statistic: observed,
                p_value: (1 + exceed) as f64 / (1 + draws) as f64,
                method: TestMethod::ExactMc,
                mc_draws: Some(draws),
                configurations: None,
            })
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{classic_combined, EstimateMethod};
    use proptest::prelude::*;

    fn est(estimate: f64, se: f64) -> EffectEstimate {
        EffectEstimate {
            estimate,
            std_error: se,
            weight_pairs: 1.0,
            component_pairs: Some(estimate),
            component_reservoir: None,
            variance_pairs: Some(se * se),
            variance_reservoir: None,
            method: EstimateMethod::PairsOnly,
            pairs: 10,
            df_pairs: Some(9),
            df_reservoir: None,
        }
    }

    /// Two-sided normal p-value from the Taylor series of erf.
    fn erf_series_p(z: f64) -> f64 {
        let x = z.abs() / std::f64::consts::SQRT_2;
        let (mut term, mut sum, mut n) = (x, x, 0.0);
        while term.abs() > 1e-17 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn z_test_examples() {
        let r = z_test(&est(1.5, 0.3), 1.5).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = z_test(&est(1.959964, 1.0), 0.0).unwrap();
        let oracle = erf_series_p(1.959964);
        assert!((oracle - 0.05).abs() < 1e-6);
        assert!((r.p_value - oracle).abs() < 1e-12);
        assert_eq!(r.method, TestMethod::ClassicZ);
        let a = z_test(&est(2.0 + 0.7, 0.4), 2.0).unwrap();
        let b = z_test(&est(2.0 - 0.7, 0.4), 2.0).unwrap();
        assert!((a.p_value - b.p_value).abs() < 1e-15);
        assert!(z_test(&est(1.0, 0.0), 0.0).is_err());
        // t reference is more conservative
        let t = z_test_with(&est(1.959964, 1.0), 0.0, ZReference::StudentT).unwrap();
        assert!(t.p_value > r.p_value);
        assert!(r.rejects(0.05) && !t.rejects(0.05));
    }

    #[test]
    fn single_pair_full_enumeration() {
        let r = exact_test(&PairedSample::from_differences(vec![2.5]), &ReservoirSample::empty(0), 0.0, ExactOptions::full())
            .unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.configurations, Some(2));
    }

    #[test]
    fn reservoir_only_enumeration() {
        let res = ReservoirSample::from_responses(vec![10.0, 11.0], vec![0.0, 1.0]);
        let r = exact_test(&PairedSample::from_differences(vec![]), &res, 0.0, ExactOptions::full()).unwrap();
        assert_eq!(r.configurations, Some(6));
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.statistic, 10.0);
    }

    #[test]
    fn enumeration_cap() {
        let res = ReservoirSample::from_responses(vec![1.0; 10], vec![0.0; 10]);
        let mut opts = ExactOptions::full();
        opts.enumeration_cap = 1000;
        assert!(matches!(
            exact_test(&PairedSample::from_differences(vec![1.0; 4]), &res, 0.0, opts),
            Err(InferenceError::TooManyConfigurations { .. })
        ));
        assert_eq!(configuration_count(3, 4, 2), 48);
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn mc_matches_full_on_small_trial() {
        let pairs = PairedSample::from_differences(vec![1.2, 0.4, 2.1]);
        let res = ReservoirSample::from_responses(vec![1.0, 2.2], vec![-0.3, 0.5]);
        let full = exact_test(&pairs, &res, 0.0, ExactOptions::full()).unwrap();
        let draws = 20_000;
        let mc = exact_test(&pairs, &res, 0.0, ExactOptions::monte_carlo(draws, 3)).unwrap();
        let p = full.p_value;
        assert!((mc.p_value - p).abs() <= 3.0 * (p * (1.0 - p) / draws as f64).sqrt() + 1.0 / draws as f64);
        assert_eq!(mc.statistic, full.statistic);
    }

    #[test]
    fn mc_is_reproducible_for_seed() {
        let pairs = PairedSample::from_differences(vec![1.2, -0.4, 2.1, 0.3]);
        let res = ReservoirSample::from_responses(vec![1.0, 2.2, 0.1], vec![-0.3, 0.5, 0.0]);
        let a = exact_test(&pairs, &res, 0.0, ExactOptions::monte_carlo(3000, 9)).unwrap();
        let b = exact_test(&pairs, &res, 0.0, ExactOptions::monte_carlo(3000, 9)).unwrap();
        assert_eq!(a, b);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
        // same answer on a single worker
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| exact_test(&pairs, &res, 0.0, ExactOptions::monte_carlo(3000, 9)).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn observed_statistic_is_centered_estimate() {
        let pairs = PairedSample::from_differences(vec![1.2, 0.4, 2.1]);
        let res = ReservoirSample::from_responses(vec![1.0, 2.2], vec![-0.3, 0.5]);
        let plain = classic_combined(&pairs, &res).unwrap();
        let r = exact_test(&pairs, &res, 0.5, ExactOptions::full()).unwrap();
        assert!((r.statistic - (plain.estimate - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ols_statistic_runs() {
        let dx = DMatrix::from_row_slice(4, 1, &[0.2, -0.1, 0.4, 0.0]);
        let pairs = PairedSample::new(vec![1.0, 0.2, 1.9, 0.7], dx).unwrap();
        let res = ReservoirSample::new(
            vec![1.0, 2.2, 0.4],
            vec![-0.3, 0.5],
            DMatrix::from_row_slice(3, 1, &[0.1, 0.9, -0.4]),
            DMatrix::from_row_slice(2, 1, &[0.3, -1.0]),
        )
        .unwrap();
        let opts = ExactOptions::full().with_statistic(ExactStatistic::Ols);
        let r = exact_test(&pairs, &res, 0.0, opts).unwrap();
        assert_eq!(r.configurations, Some(16 * 10));
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    proptest! {
        #[test]
        fn fast_classic_matches_materialized(
            d in prop::collection::vec(-5.0f64..5.0, 0..6),
            t in prop::collection::vec(-5.0f64..5.0, 0..5),
            c in prop::collection::vec(-5.0f64..5.0, 0..5),
            mask in any::<u64>(),
        ) {
            let pairs = PairedSample::from_differences(d.clone());
            let res = ReservoirSample::from_responses(t.clone(), c.clone());
            let frame = PermutationFrame::new(&pairs, &res, 0.0);
            let signs: Vec<bool> = (0..d.len()).map(|k| mask >> k & 1 == 1).collect();
            let n_r = t.len() + c.len();
            let treated: Vec<usize> = (0..n_r).filter(|i| mask >> (20 + i) & 1 == 1).collect();
            let (ps, rs) = frame.materialize(&signs, &treated);
            let slow = classic_point(&ps.differences, &rs.responses_t, &rs.responses_c);
            let fast = frame.classic_stat(&signs, &treated);
            match (slow, fast) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
            }
        }

        #[test]
        fn full_p_invariant_to_ordering(
            d in prop::collection::vec(-5.0f64..5.0, 1..5),
            t in prop::collection::vec(-5.0f64..5.0, 2..4),
            c in prop::collection::vec(-5.0f64..5.0, 2..4),
        ) {
            let base = exact_test(
                &PairedSample::from_differences(d.clone()),
                &ReservoirSample::from_responses(t.clone(), c.clone()),
                0.0,
                ExactOptions::full(),
            ).unwrap();
            let (mut d2, mut t2, mut c2) = (d.clone(), t.clone(), c.clone());
            d2.reverse();
            t2.reverse();
            c2.rotate_left(1);
            let other = exact_test(
                &PairedSample::from_differences(d2),
                &ReservoirSample::from_responses(t2, c2),
                0.0,
                ExactOptions::full(),
            ).unwrap();
            prop_assert!((base.p_value - other.p_value).abs() < 1e-12);
            prop_assert!(base.p_value > 0.0 && base.p_value <= 1.0);
        }
    }
}
