//! Simulation studies: scenario generation, the allocator-by-test grid, and
//! the Markov analysis of the reservoir.

mod chain;
mod scenario;

use std::fmt::{self, Write as _};
use std::io;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chain::{chain_stationary, chain_transition, ChainSummary, ReservoirChain};
pub use scenario::{generate_trial, Scenario, ScenarioSpec, SimSubject};

use crate::competitors::{allocate_stream, analysis_covariates, CompetitorKind, StratumGrid};
use crate::engine::{Arm, EngineConfig, EngineError, TrialState};
use crate::estimators::{classic_combined, ols_combined, samples_from_split, PairedSample, ReservoirSample};
use crate::inference::{exact_test, z_test, ExactOptions};
use crate::numstat::{f_cdf, mean, normal_quantile};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("report output failed: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Allocator {
    SM,
    CR,
    BCD,
    STRAT,
    MIN,
}

impl Allocator {
    pub const ALL: [Allocator; 5] = [
        Allocator::SM,
        Allocator::CR,
        Allocator::BCD,
        Allocator::STRAT,
        Allocator::MIN,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Allocator::SM => "SM",
            Allocator::CR => "CR",
            Allocator::BCD => "BCD",
            Allocator::STRAT => "STRAT",
            Allocator::MIN => "MIN",
        }
    }

    pub fn competitor(self) -> Option<CompetitorKind> {
        match self {
            Allocator::SM => None,
            Allocator::CR => Some(CompetitorKind::CompleteRandomization),
            Allocator::BCD => Some(CompetitorKind::Efron),
            Allocator::STRAT => Some(CompetitorKind::Stratification),
            Allocator::MIN => Some(CompetitorKind::Minimization),
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Allocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Allocator {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Allocator::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| SimError::InvalidSpec(format!("unknown allocator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// Combined estimator with a normal-reference z test.
    Classic,
    /// Regression-adjusted combined estimator with a z test.
    Linear,
    /// Permutation test on the combined estimator.
    Exact,
}

impl TestKind {
    pub const ALL: [TestKind; 3] = [TestKind::Classic, TestKind::Linear, TestKind::Exact];

    pub fn label(self) -> &'static str {
        match self {
            TestKind::Classic => "classic",
            TestKind::Linear => "linear",
            TestKind::Exact => "exact",
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TestKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TestKind::ALL
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| SimError::InvalidSpec(format!("unknown test {s:?}")))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of indices into an independent seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Largest standardized covariate difference between arms, in absolute
/// value: `|max_j (xbar_jT - xbar_jC) / sqrt(s2_jT/n_T + s2_jC/n_C)|`.
///
/// `None` when either arm has fewer than two subjects or a covariate is
/// constant within both arms.
pub fn balance(xs: &[Vec<f64>], arms: &[Arm]) -> Option<f64> {
    let p = xs.first()?.len();
    let mut best = f64::NEG_INFINITY;
    for j in 0..p {
        let (t, c): (Vec<f64>, Vec<f64>) = {
            let mut t = Vec::new();
            let mut c = Vec::new();
            for (x, arm) in xs.iter().zip(arms) {
                if arm.is_treatment() { t.push(x[j]) } else { c.push(x[j]) }
            }
            (t, c)
        };
        if t.len() < 2 || c.len() < 2 {
            return None;
        }
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = (var(&t) / t.len() as f64 + var(&c) / c.len() as f64).sqrt();
        if se == 0.0 {
            return None;
        }
        best = best.max((mean(&t) - mean(&c)) / se);
    }
    Some(best.abs())
}

/// Runs the matching engine over a fixed covariate stream.
pub fn sequential_matching(xs: &[Vec<f64>], lambda: f64, seed: u64) -> Result<TrialState, EngineError> {
    let p = xs.first().map_or(1, Vec::len);
    let mut state = TrialState::new(EngineConfig::new(p, lambda, xs.len() as u64, seed))?;
    for x in xs {
        state.allocate(x)?;
    }
    Ok(state)
}

/// Reservoir size after each entrant for a stream of standard normal
/// covariates of dimension `p`.
pub fn reservoir_path(p: usize, lambda: f64, n: u64, seed: u64) -> Result<Vec<usize>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let mut state = TrialState::new(EngineConfig::new(p, lambda, n, derive_seed(seed, &[1])))?;
    let mut path = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        state.allocate(&x)?;
        path.push(state.reservoir().len());
    }
    Ok(path)
}

/// Result of one allocator/test combination on one replication. `None`
/// fields mark an exclusion (the estimator or test was not computable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub allocator: Allocator,
    pub test: TestKind,
    pub estimate: Option<f64>,
    pub rejected: Option<bool>,
    pub balance: Option<f64>,
}

fn analyse(
    pairs: &PairedSample,
    reservoir: &ReservoirSample,
    test: TestKind,
    spec: &ScenarioSpec,
    mc_seed: u64,
) -> Option<(f64, bool)> {
    match test {
        TestKind::Classic => {
            let est = classic_combined(pairs, reservoir).ok()?;
            let t = z_test(&est, 0.0).ok()?;
            Some((est.estimate, t.rejects(spec.alpha)))
        }
        TestKind::Linear => {
            let est = ols_combined(pairs, reservoir).ok()?;
            let t = z_test(&est, 0.0).ok()?;
            Some((est.estimate, t.rejects(spec.alpha)))
        }
        TestKind::Exact => {
            let est = classic_combined(pairs, reservoir).ok()?;
            let t = exact_test(pairs, reservoir, 0.0, ExactOptions::monte_carlo(spec.mc_draws, mc_seed)).ok()?;
            Some((est.estimate, t.rejects(spec.alpha)))
        }
    }
}

fn cell_path(spec: &ScenarioSpec) -> [u64; 2] {
    [spec.scenario as u64, spec.n as u64]
}

/// One replication of one cell; every allocator sees the same subjects.
pub fn run_replication(
    spec: &ScenarioSpec,
    rep: u64,
    allocators: &[Allocator],
    tests: &[TestKind],
) -> Result<Vec<Outcome>, SimError> {
    let [cs, cn] = cell_path(spec);
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[cs, cn, rep, 0]));
    let subjects = generate_trial(spec, &mut data_rng);
    let xs: Vec<Vec<f64>> = subjects.iter().map(|s| s.x.to_vec()).collect();
    let mut out = Vec::with_capacity(allocators.len() * tests.len());
    for &alloc in allocators {
        let alloc_seed = derive_seed(spec.seed, &[cs, cn, rep, 1, alloc.index()]);
        let (arms, pairs, reservoir) = match alloc.competitor() {
            None => {
                let state = sequential_matching(&xs, spec.lambda, alloc_seed)?;
                let arms: Vec<Arm> = state.subjects().iter().map(|s| s.arm).collect();
                let ys: Vec<f64> = subjects.iter().zip(&arms).map(|(s, &a)| s.response(spec, a)).collect();
                let (pairs, reservoir) = samples_from_split(&state.split(), |id| ys.get(id as usize - 1).copied())
                    .map_err(|e| SimError::Numeric(e.to_string()))?;
                (arms, pairs, reservoir)
            }
            Some(kind) => {
                let mut rng = ChaCha8Rng::seed_from_u64(alloc_seed);
                let arms = allocate_stream(kind, &xs, &mut rng);
                let grid = StratumGrid::new();
                let rows: Vec<Vec<f64>> = xs.iter().map(|x| analysis_covariates(kind, x, &grid)).collect();
                let q = rows[0].len();
                let (mut yt, mut yc, mut xt, mut xc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for ((s, row), &a) in subjects.iter().zip(&rows).zip(&arms) {
                    let y = s.response(spec, a);
                    if a.is_treatment() {
                        yt.push(y);
                        xt.extend_from_slice(row);
                    } else {
                        yc.push(y);
                        xc.extend_from_slice(row);
                    }
                }
                let (nt, nc) = (yt.len(), yc.len());
                let reservoir = ReservoirSample::new(
                    yt,
                    yc,
                    DMatrix::from_row_slice(nt, q, &xt),
                    DMatrix::from_row_slice(nc, q, &xc),
                )
                .map_err(|e| SimError::Numeric(e.to_string()))?;
                let pairs = PairedSample::new(Vec::new(), DMatrix::zeros(0, q)).map_err(|e| SimError::Numeric(e.to_string()))?;
                (arms, pairs, reservoir)
            }
        };
        let bal = balance(&xs, &arms);
        for &test in tests {
            let mc_seed = derive_seed(spec.seed, &[cs, cn, rep, 2, alloc.index(), test as u64]);
            let res = analyse(&pairs, &reservoir, test, spec, mc_seed);
            out.push(Outcome {
                allocator: alloc,
                test,
                estimate: res.map(|r| r.0),
                rejected: res.map(|r| r.1),
                balance: bal,
            });
        }
    }
    Ok(out)
}

/// Aggregate of one (scenario, n, allocator, test) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub n: usize,
    pub lambda: f64,
    pub beta_t: f64,
    pub allocator: Allocator,
    pub test: TestKind,
    pub replications: usize,
    pub exclusions: usize,
    /// Exclusions reached 1% of replications.
    pub flagged: bool,
    pub rejection_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_estimate: f64,
    pub empirical_se: f64,
    pub mean_balance: Option<f64>,
    /// `var(this allocator) / var(SM)` for the same scenario, n and test.
    pub efficiency: Option<f64>,
    pub efficiency_p_value: Option<f64>,
    pub efficiency_significant: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub cells: Vec<CellSummary>,
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = normal_quantile(0.975).expect("valid probability");
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Two-sided F test of equal variances for the ratio `var_a / var_b`.
pub fn variance_ratio_p_value(ratio: f64, n_a: usize, n_b: usize) -> Option<f64> {
    if n_a < 2 || n_b < 2 || !ratio.is_finite() || ratio <= 0.0 {
        return None;
    }
    let cdf = f_cdf(ratio, (n_a - 1) as u32, (n_b - 1) as u32).ok()?;
    Some((2.0 * cdf.min(1.0 - cdf)).min(1.0))
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn summarise(spec: &ScenarioSpec, allocator: Allocator, test: TestKind, outcomes: &[Outcome]) -> (CellSummary, Vec<f64>) {
    let mine: Vec<&Outcome> = outcomes.iter().filter(|o| o.allocator == allocator && o.test == test).collect();
    let estimates: Vec<f64> = mine.iter().filter_map(|o| o.estimate).collect();
    let decided: Vec<bool> = mine.iter().filter_map(|o| o.rejected).collect();
    let balances: Vec<f64> = mine.iter().filter_map(|o| o.balance).collect();
    let exclusions = mine.len() - decided.len();
    let rejections = decided.iter().filter(|&&r| r).count();
    let (ci_low, ci_high) = wilson_interval(rejections, decided.len());
    let cell = CellSummary {
        scenario: spec.scenario,
        n: spec.n,
        lambda: spec.lambda,
        beta_t: spec.beta_t,
        allocator,
        test,
        replications: mine.len(),
        exclusions,
        flagged: exclusions * 100 >= mine.len().max(1),
        rejection_rate: if decided.is_empty() { f64::NAN } else { rejections as f64 / decided.len() as f64 },
        ci_low,
        ci_high,
        mean_estimate: if estimates.is_empty() { f64::NAN } else { mean(&estimates) },
        empirical_se: sample_var(&estimates).sqrt(),
        mean_balance: (!balances.is_empty()).then(|| mean(&balances)),
        efficiency: None,
        efficiency_p_value: None,
        efficiency_significant: None,
    };
    (cell, estimates)
}

pub fn run_grid(specs: &[ScenarioSpec], allocators: &[Allocator], tests: &[TestKind]) -> Result<SimReport, SimError> {
    if allocators.is_empty() || tests.is_empty() {
        return Err(SimError::InvalidSpec("at least one allocator and one test are required".into()));
    }
    let mut report = SimReport::default();
    for spec in specs {
        spec.validate()?;
        let per_rep: Vec<Vec<Outcome>> = (0..spec.replications as u64)
            .into_par_iter()
            .map(|rep| run_replication(spec, rep, allocators, tests))
            .collect::<Result<_, _>>()?;
        let outcomes: Vec<Outcome> = per_rep.into_iter().flatten().collect();
        for &test in tests {
            let cells: Vec<(CellSummary, Vec<f64>)> = allocators
                .iter()
                .map(|&a| summarise(spec, a, test, &outcomes))
                .collect();
            let sm = cells.iter().find(|(c, _)| c.allocator == Allocator::SM).map(|(c, e)| (c.empirical_se, e.len()));
            for (mut cell, est) in cells {
                if let Some((sm_se, sm_n)) = sm {
                    let ratio = cell.empirical_se.powi(2) / sm_se.powi(2);
                    if ratio.is_finite() {
                        cell.efficiency = Some(ratio);
                        cell.efficiency_p_value = variance_ratio_p_value(ratio, est.len(), sm_n);
                        cell.efficiency_significant = cell.efficiency_p_value.map(|p| p < 0.01);
                    }
                }
                report.cells.push(cell);
            }
        }
    }
    Ok(report)
}

impl SimReport {
    pub fn cell(&self, scenario: Scenario, n: usize, allocator: Allocator, test: TestKind) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.n == n && c.allocator == allocator && c.test == test)
    }

    /// One row per cell with every metric.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        for cell in &self.cells {
            w.serialize(cell).map_err(|e| SimError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| SimError::Output(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<3} {:>4} {:<6} {:<8} {:>7} {:>17} {:>8} {:>7} {:>7} {:>7} {:>5}",
            "scn", "n", "alloc", "test", "reject", "95% ci", "mean", "se", "bal", "eff", "excl"
        );
        for c in &self.cells {
            let eff = match (c.efficiency, c.efficiency_significant) {
                (Some(e), Some(true)) => format!("{e:.3}*"),
                (Some(e), _) => format!("{e:.3}"),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:<3} {:>4} {:<6} {:<8} {:>7.3} [{:>6.3}, {:>6.3}] {:>8.3} {:>7.3} {:>7} {:>7} {:>4}{}",
                c.scenario.label(),
                c.n,
                c.allocator.label(),
                c.test.label(),
                c.rejection_rate,
                c.ci_low,
                c.ci_high,
                c.mean_estimate,
                c.empirical_se,
                c.mean_balance.map_or("-".into(), |b| format!("{b:.3}")),
                eff,
                c.exclusions,
                if c.flagged { "!" } else { "" }
            );
        }
        s
    }
}
