//! Baseline allocation procedures: complete randomization, Efron's biased
//! coin, stratified alternation and Pocock-Simon minimization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Arm;
use crate::numstat::normal_quantile;

/// Efron's bias toward the under-allocated arm.
pub const EFRON_BIAS: f64 = 2.0 / 3.0;

pub fn complete_randomization<R: Rng + ?Sized>(rng: &mut R) -> Arm {
    Arm::from_coin(rng.random::<bool>())
}

/// Probability of assigning treatment given current arm totals.
pub fn efron_probability(n_t: u64, n_c: u64) -> f64 {
    match n_t.cmp(&n_c) {
        std::cmp::Ordering::Equal => 0.5,
        std::cmp::Ordering::Less => EFRON_BIAS,
        std::cmp::Ordering::Greater => 1.0 - EFRON_BIAS,
    }
}

pub fn efron_bcd<R: Rng + ?Sized>(n_t: u64, n_c: u64, rng: &mut R) -> Arm {
    Arm::from_coin(rng.random::<f64>() < efron_probability(n_t, n_c))
}

/// Tertile cut points of the standard normal.
pub fn tertile_cuts() -> [f64; 2] {
    [
        normal_quantile(1.0 / 3.0).expect("valid level"),
        normal_quantile(2.0 / 3.0).expect("valid level"),
    ]
}

/// Level in `0..3` of a covariate value relative to the tertile cuts.
pub fn level(value: f64, cuts: &[f64; 2]) -> usize {
    if value < cuts[0] {
        0
    } else if value < cuts[1] {
        1
    } else {
        2
    }
}

pub const BLOCKS: usize = 9;

/// Nine blocks from two covariates, three levels each; assignments
/// alternate within a block, starting from a fair coin.
#[derive(Debug, Clone)]
pub struct StratumGrid {
    cuts: [f64; 2],
    next: [Option<Arm>; BLOCKS],
}

impl Default for StratumGrid {
    fn default() -> Self {
        Self::new()
    }
}

impl StratumGrid {
    pub fn new() -> Self {
        Self {
            cuts: tertile_cuts(),
            next: [None; BLOCKS],
        }
    }

    pub fn cuts(&self) -> [f64; 2] {
        self.cuts
    }

    /// Block index in `0..9`, `3 * level(x1) + level(x2)`.
    pub fn block(&self, x: &[f64]) -> usize {
        3 * level(x[0], &self.cuts) + level(x[1], &self.cuts)
    }

    pub fn allocate<R: Rng + ?Sized>(&mut self, x: &[f64], rng: &mut R) -> Arm {
        let b = self.block(x);
        let arm = self.next[b].unwrap_or_else(|| complete_randomization(rng));
        self.next[b] = Some(arm.opposite());
        arm
    }
}

/// Pocock-Simon minimization over the tertile levels of each covariate,
/// with variance as the imbalance function and the sum across covariates
/// as the total. Deterministic except for ties.
#[derive(Debug, Clone)]
pub struct MinimizationState {
    cuts: [f64; 2],
    /// `counts[covariate][level] = [n_T, n_C]`
    counts: Vec<[[u64; 2]; 3]>,
}

impl MinimizationState {
    pub fn new(p: usize) -> Self {
        Self {
            cuts: tertile_cuts(),
            counts: vec![[[0; 2]; 3]; p],
        }
    }

    pub fn levels(&self, x: &[f64]) -> Vec<usize> {
        x.iter().map(|&v| level(v, &self.cuts)).collect()
    }

    pub fn counts(&self, covariate: usize, level: usize) -> [u64; 2] {
        self.counts[covariate][level]
    }

    /// Sample variance of two counts.
    fn imbalance(n_t: u64, n_c: u64) -> f64 {
        let d = n_t as f64 - n_c as f64;
        d * d / 2.0
    }

    /// Total imbalance if the subject at `levels` were given `arm`.
    pub fn score(&self, levels: &[usize], arm: Arm) -> f64 {
        levels
            .iter()
            .enumerate()
            .map(|(j, &l)| {
                let [mut t, mut c] = self.counts[j][l];
                match arm {
                    Arm::Treatment => t += 1,
                    Arm::Control => c += 1,
                }
                Self::imbalance(t, c)
            })
            .sum()
    }

    pub fn record(&mut self, levels: &[usize], arm: Arm) {
        let slot = usize::from(arm == Arm::Control);
        for (j, &l) in levels.iter().enumerate() {
            self.counts[j][l][slot] += 1;
        }
    }

    pub fn allocate<R: Rng + ?Sized>(&mut self, x: &[f64], rng: &mut R) -> Arm {
        let levels = self.levels(x);
        let g_t = self.score(&levels, Arm::Treatment);
        let g_c = self.score(&levels, Arm::Control);
        let arm = if g_t < g_c {
            Arm::Treatment
        } else if g_c < g_t {
            Arm::Control
        } else {
            complete_randomization(rng)
        };
        self.record(&levels, arm);
        arm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CompetitorKind {
    #[serde(rename = "CR")]
    CompleteRandomization,
    #[serde(rename = "BCD")]
    Efron,
    #[serde(rename = "STRAT")]
    Stratification,
    #[serde(rename = "MIN")]
    Minimization,
}

impl CompetitorKind {
    pub const ALL: [CompetitorKind; 4] = [
        CompetitorKind::CompleteRandomization,
        CompetitorKind::Efron,
        CompetitorKind::Stratification,
        CompetitorKind::Minimization,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CompetitorKind::CompleteRandomization => "CR",
            CompetitorKind::Efron => "BCD",
            CompetitorKind::Stratification => "STRAT",
            CompetitorKind::Minimization => "MIN",
        }
    }
}

/// Runs a competitor over a whole stream of covariate vectors.
pub fn allocate_stream<R: Rng + ?Sized>(kind: CompetitorKind, xs: &[Vec<f64>], rng: &mut R) -> Vec<Arm> {
    let mut arms = Vec::with_capacity(xs.len());
    match kind {
        CompetitorKind::CompleteRandomization => {
            for _ in xs {
                arms.push(complete_randomization(rng));
            }
        }
        CompetitorKind::Efron => {
            let (mut n_t, mut n_c) = (0, 0);
            for _ in xs {
                let arm = efron_bcd(n_t, n_c, rng);
                if arm.is_treatment() {
                    n_t += 1;
                } else {
                    n_c += 1;
                }
                arms.push(arm);
            }
        }
        CompetitorKind::Stratification => {
            let mut grid = StratumGrid::new();
            for x in xs {
                arms.push(grid.allocate(x, rng));
            }
        }
        CompetitorKind::Minimization => {
            let mut state = MinimizationState::new(xs.first().map_or(0, Vec::len));
            for x in xs {
                arms.push(state.allocate(x, rng));
            }
        }
    }
    arms
}

/// Covariates entering a competitor's regression adjustment. Stratified
/// designs add indicators for blocks 1..9 (block 0 is the baseline).
pub fn analysis_covariates(kind: CompetitorKind, x: &[f64], grid: &StratumGrid) -> Vec<f64> {
    let mut row = x.to_vec();
    if kind == CompetitorKind::Stratification {
        let b = grid.block(x);
        row.extend((1..BLOCKS).map(|k| f64::from(u8::from(b == k))));
    }
    row
}
