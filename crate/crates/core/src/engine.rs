//! Sequential matched-pair allocation.
//!
//! Each arriving subject is compared against the unmatched subjects waiting
//! in the reservoir using half the squared Mahalanobis distance under the
//! running covariance of everyone seen so far. If the closest reservoir
//! member is within the F-derived cutoff for `lambda`, the newcomer takes
//! the opposite arm and the pair leaves the reservoir; otherwise the
//! newcomer is randomized by a fair coin and joins the reservoir.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numstat::{f_quantile, pinv, CovAccumulator, NumError};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("covariate dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("trial already has all {0} subjects")]
    TrialComplete(u64),
    #[error("trial incomplete: {have} of {target} subjects allocated")]
    TrialIncomplete { have: u64, target: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("subject {0} is not waiting in the reservoir")]
    NotInReservoir(u64),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "T")]
    Treatment,
    #[serde(rename = "C")]
    Control,
}

impl Arm {
    pub fn opposite(self) -> Arm {
        match self {
            Arm::Treatment => Arm::Control,
            Arm::Control => Arm::Treatment,
        }
    }

    pub fn is_treatment(self) -> bool {
        self == Arm::Treatment
    }

    /// Fair coin: `true` maps to treatment.
    pub fn from_coin(heads: bool) -> Arm {
        if heads {
            Arm::Treatment
        } else {
            Arm::Control
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Treatment => "T",
            Arm::Control => "C",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    /// 1-based arrival order among allocated subjects.
    pub id: u64,
    pub covariates: Vec<f64>,
    pub arm: Arm,
    pub match_partner: Option<u64>,
}

/// ChaCha8 stream whose position can be saved and restored exactly.
#[derive(Debug, Clone)]
pub struct TrialRng {
    seed: u64,
    inner: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TrialRngRepr {
    seed: u64,
    word_pos: u64,
}

impl TrialRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn word_pos(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }
}

impl PartialEq for TrialRng {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.word_pos() == other.word_pos()
    }
}

impl Serialize for TrialRng {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrialRngRepr {
            seed: self.seed,
            word_pos: self.word_pos(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrialRng {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TrialRngRepr::deserialize(d)?;
        let mut rng = TrialRng::new(repr.seed);
        rng.inner.set_word_pos(u128::from(repr.word_pos));
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub p: usize,
    pub lambda: f64,
    pub n_target: u64,
    pub seed: u64,
    /// Absolute eigenvalue cutoff for the covariance pseudoinverse; the
    /// relative default is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinv_tolerance: Option<f64>,
}

impl EngineConfig {
    pub fn new(p: usize, lambda: f64, n_target: u64, seed: u64) -> Self {
        Self {
            p,
            lambda,
            n_target,
            seed,
            pinv_tolerance: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.p == 0 {
            return Err(EngineError::InvalidConfig("need at least one covariate".into()));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(EngineError::InvalidConfig(format!(
                "lambda {} outside (0, 1)",
                self.lambda
            )));
        }
        if self.n_target == 0 {
            return Err(EngineError::InvalidConfig("n_target must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub subject_id: u64,
    pub arm: Arm,
    pub matched: bool,
    pub partner: Option<u64>,
    /// Smallest reservoir statistic, when the matching branch was evaluated.
    pub min_stat: Option<f64>,
    pub threshold: Option<f64>,
}

/// Outcome of comparing a newcomer against the reservoir.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Screening {
    /// `t <= p` or the reservoir is empty.
    Randomize,
    /// Nearest reservoir member exceeds the cutoff.
    NoMatch { nearest: u64, min_stat: f64, threshold: f64 },
    Match { partner: u64, min_stat: f64, threshold: f64 },
}

impl Screening {
    fn stats(&self) -> (Option<f64>, Option<f64>) {
        match *self {
            Screening::Randomize => (None, None),
            Screening::NoMatch { min_stat, threshold, .. }
            | Screening::Match { min_stat, threshold, .. } => (Some(min_stat), Some(threshold)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSplit {
    /// (treatment, control)
    pub pairs: Vec<(Subject, Subject)>,
    pub reservoir: Vec<Subject>,
}

/// Half the squared Mahalanobis distance, `0.5 * d' S_inv d`.
pub fn mahalanobis_stat(x_a: &[f64], x_b: &[f64], s_inv: &DMatrix<f64>) -> Result<f64, EngineError> {
    let p = s_inv.nrows();
    for len in [x_a.len(), x_b.len()] {
        if len != p {
            return Err(EngineError::DimensionMismatch { expected: p, found: len });
        }
    }
    let d = DVector::from_iterator(p, x_a.iter().zip(x_b).map(|(a, b)| a - b));
    Ok((0.5 * d.dot(&(s_inv * &d))).max(0.0))
}

/// Matching cutoff `p (t - 1) / (t - p) * F^{-1}(lambda; p, t - p)`; requires
/// `t > p`.
pub fn match_threshold(p: usize, t: u64, lambda: f64) -> Result<f64, EngineError> {
    let p64 = p as u64;
    if t <= p64 {
        return Err(EngineError::InvalidConfig(format!("threshold needs t > p (t={t}, p={p})")));
    }
    let q = f_quantile(lambda, p as u32, (t - p64) as u32)?;
    Ok(p as f64 * (t - 1) as f64 / (t - p64) as f64 * q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    config: EngineConfig,
    subjects: Vec<Subject>,
    reservoir: Vec<u64>,
    /// (earlier reservoir member, matched newcomer)
    matches: Vec<(u64, u64)>,
    cov: CovAccumulator,
    rng: TrialRng,
}

#[derive(Serialize, Deserialize)]
struct Snapshot<T> {
    version: u32,
    #[serde(flatten)]
    state: T,
}

impl TrialState {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self {
            cov: CovAccumulator::new(config.p),
            rng: TrialRng::new(config.seed),
            config,
            subjects: Vec::new(),
            reservoir: Vec::new(),
            matches: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn n_target(&self) -> u64 {
        self.config.n_target
    }

    /// Subjects allocated so far.
    pub fn t(&self) -> u64 {
        self.subjects.len() as u64
    }

    /// Entrants whose covariates have entered the running covariance. Equal to
    /// [`TrialState::t`] unless entrants were observed without allocation.
    pub fn observed(&self) -> u64 {
        self.cov.count()
    }

    pub fn is_complete(&self) -> bool {
        self.t() >= self.config.n_target
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, id: u64) -> Option<&Subject> {
        id.checked_sub(1).and_then(|i| self.subjects.get(i as usize))
    }

    pub fn reservoir(&self) -> &[u64] {
        &self.reservoir
    }

    pub fn matches(&self) -> &[(u64, u64)] {
        &self.matches
    }

    pub fn covariance(&self) -> &CovAccumulator {
        &self.cov
    }

    pub fn rng_position(&self) -> u64 {
        self.rng.word_pos()
    }

    fn check_entrant(&self, x: &[f64]) -> Result<(), EngineError> {
        if x.len() != self.config.p {
            return Err(EngineError::DimensionMismatch {
                expected: self.config.p,
                found: x.len(),
            });
        }
        if self.is_complete() {
            return Err(EngineError::TrialComplete(self.config.n_target));
        }
        Ok(())
    }

    /// Evaluates the matching rule for `x` as if it had just been observed,
    /// without changing the state.
    pub fn screen(&self, x: &[f64]) -> Result<Screening, EngineError> {
        self.check_entrant(x)?;
        let mut cov = self.cov.clone();
        cov.update(x)?;
        let t = cov.count();
        if t <= self.config.p as u64 || self.reservoir.is_empty() {
            return Ok(Screening::Randomize);
        }
        let s = cov.covariance().expect("t > p >= 1 implies two observations");
        let s_inv = pinv(&s, self.config.pinv_tolerance);
        let threshold = match_threshold(self.config.p, t, self.config.lambda)?;
        let mut best: Option<(u64, f64)> = None;
        for &id in &self.reservoir {
            let other = &self.subjects[(id - 1) as usize].covariates;
            let stat = mahalanobis_stat(x, other, &s_inv)?;
            // strict: earliest arrival wins ties
            if best.is_none_or(|(_, b)| stat < b) {
                best = Some((id, stat));
            }
        }
        let (nearest, min_stat) = best.expect("reservoir is non-empty");
        Ok(if min_stat <= threshold {
            Screening::Match {
                partner: nearest,
                min_stat,
                threshold,
            }
        } else {
            Screening::NoMatch {
                nearest,
                min_stat,
                threshold,
            }
        })
    }

    /// Runs one step of the allocation rule.
    pub fn allocate(&mut self, x: &[f64]) -> Result<AllocationDecision, EngineError> {
        let screening = self.screen(x)?;
        match screening {
            Screening::Match { partner, .. } => self.admit_match(x, partner, screening),
            Screening::Randomize | Screening::NoMatch { .. } => {
                let arm = Arm::from_coin(self.rng.coin());
                self.admit_reservoir(x, arm, screening)
            }
        }
    }

    /// Adds `x` to the reservoir with an externally chosen arm. No randomness
    /// is consumed.
    pub fn admit_reservoir(
        &mut self,
        x: &[f64],
        arm: Arm,
        screening: Screening,
    ) -> Result<AllocationDecision, EngineError> {
        self.check_entrant(x)?;
        self.cov.update(x)?;
        let id = self.t() + 1;
        self.subjects.push(Subject {
            id,
            covariates: x.to_vec(),
            arm,
            match_partner: None,
        });
        self.reservoir.push(id);
        let (min_stat, threshold) = screening.stats();
        Ok(AllocationDecision {
            subject_id: id,
            arm,
            matched: false,
            partner: None,
            min_stat,
            threshold,
        })
    }

    /// Pairs `x` with reservoir member `partner`, assigning the opposite arm.
    pub fn admit_match(
        &mut self,
        x: &[f64],
        partner: u64,
        screening: Screening,
    ) -> Result<AllocationDecision, EngineError> {
        self.check_entrant(x)?;
        let pos = self
            .reservoir
            .iter()
            .position(|&r| r == partner)
            .ok_or(EngineError::NotInReservoir(partner))?;
        self.cov.update(x)?;
        self.reservoir.remove(pos);
        let id = self.t() + 1;
        let arm = self.subjects[(partner - 1) as usize].arm.opposite();
        self.subjects[(partner - 1) as usize].match_partner = Some(id);
        self.subjects.push(Subject {
            id,
            covariates: x.to_vec(),
            arm,
            match_partner: Some(partner),
        });
        self.matches.push((partner, id));
        let (min_stat, threshold) = screening.stats();
        Ok(AllocationDecision {
            subject_id: id,
            arm,
            matched: true,
            partner: Some(partner),
            min_stat,
            threshold,
        })
    }

    /// Folds `x` into the running covariance without allocating it.
    pub fn observe_only(&mut self, x: &[f64]) -> Result<(), EngineError> {
        self.check_entrant(x)?;
        self.cov.update(x)?;
        Ok(())
    }

    /// Current pairs (treatment first) and reservoir, complete or not.
    pub fn split(&self) -> TrialSplit {
        let pairs = self
            .matches
            .iter()
            .map(|&(a, b)| {
                let (sa, sb) = (self.subjects[(a - 1) as usize].clone(), self.subjects[(b - 1) as usize].clone());
                if sa.arm.is_treatment() {
                    (sa, sb)
                } else {
                    (sb, sa)
                }
            })
            .collect();
        let reservoir = self
            .reservoir
            .iter()
            .map(|&id| self.subjects[(id - 1) as usize].clone())
            .collect();
        TrialSplit { pairs, reservoir }
    }

    pub fn finalize(&self) -> Result<TrialSplit, EngineError> {
        if !self.is_complete() {
            return Err(EngineError::TrialIncomplete {
                have: self.t(),
                target: self.config.n_target,
            });
        }
        Ok(self.split())
    }

    /// Versioned JSON document capturing the complete state.
    pub fn to_snapshot(&self) -> String {
        serde_json::to_string(&Snapshot {
            version: SNAPSHOT_VERSION,
            state: self,
        })
        .expect("trial state serializes")
    }

    pub fn from_snapshot(doc: &str) -> Result<Self, EngineError> {
        let snap: Snapshot<TrialState> =
            serde_json::from_str(doc).map_err(|e| EngineError::Snapshot(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(EngineError::Snapshot(format!("unsupported version {}", snap.version)));
        }
        snap.state.config.validate()?;
        Ok(snap.state)
    }
}
