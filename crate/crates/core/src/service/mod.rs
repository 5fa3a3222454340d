//! Persistent management of live trials. Each trial is an append-only event
//! log; in-memory state is always the replay of that log.

mod log;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use log::{EventLog, LogEvent, LOG_VERSION};

use crate::engine::{AllocationDecision, Arm, EngineConfig, EngineError, Subject, TrialState};
use crate::estimators::{classic_combined, ols_combined, samples_from_split, EffectEstimate, EstimatorError};
use crate::inference::{exact_test, z_test_with, ExactOptions, ExactStatistic, InferenceError, TestResult, ZReference};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid trial specification: {0}")]
    InvalidSpec(String),
    #[error("trial {0:?} already exists")]
    Conflict(String),
    #[error("trial {0:?} not found")]
    NotFound(String),
    #[error("covariates do not match the trial schema: {0}")]
    Schema(String),
    #[error("trial {0:?} is complete")]
    TrialComplete(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("event log is corrupt: {0}")]
    Corrupt(String),
    #[error("invalid report request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateField {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_id: Option<String>,
    pub covariates: Vec<CovariateField>,
    /// Falls back to the store's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub n_target: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hide match details (partner, distances) in responses.
    #[serde(default)]
    pub mask_matches: bool,
}

impl TrialSpec {
    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    fn validate(&self) -> Result<(), ServiceError> {
        if self.covariates.is_empty() {
            return Err(ServiceError::InvalidSpec("at least one covariate is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.covariates {
            if f.name.trim().is_empty() {
                return Err(ServiceError::InvalidSpec("covariate names must be non-empty".into()));
            }
            if !seen.insert(&f.name) {
                return Err(ServiceError::InvalidSpec(format!("duplicate covariate {:?}", f.name)));
            }
        }
        if let Some(id) = &self.trial_id {
            validate_id(id)?;
        }
        Ok(())
    }
}

fn validate_id(id: &str) -> Result<(), ServiceError> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::InvalidSpec(format!("trial id {id:?} must be 1-64 characters of [A-Za-z0-9_-]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Open,
    Complete,
}

/// Covariates as submitted: by name, or in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateInput {
    Named(BTreeMap<String, f64>),
    Ordered(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollRequest {
    pub covariates: CovariateInput,
    /// Client-chosen key making retries safe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollResponse {
    pub trial_id: String,
    pub subject_id: u64,
    pub arm: Arm,
    pub matched: Option<bool>,
    pub partner: Option<u64>,
    pub min_stat: Option<f64>,
    pub threshold: Option<f64>,
    pub masked: bool,
    pub status: TrialStatus,
    pub t: u64,
    pub pairs: usize,
    pub reservoir_size: usize,
    /// True when this answers a retry of an already-recorded event key.
    pub replayed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectView {
    pub id: u64,
    pub covariates: Vec<f64>,
    pub arm: Arm,
    pub partner: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: String,
    pub status: TrialStatus,
    pub p: usize,
    pub lambda: f64,
    pub n_target: u64,
    pub t: u64,
    pub pairs: usize,
    pub reservoir_size: usize,
    pub created_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    #[serde(flatten)]
    pub summary: TrialSummary,
    pub covariates: Vec<CovariateField>,
    pub mask_matches: bool,
    pub seed: u64,
    /// Omitted for masked trials.
    pub subjects: Option<Vec<SubjectView>>,
    pub reservoir: Option<Vec<u64>>,
    /// `(reservoir member, later entrant)` in match order.
    pub matches: Option<Vec<(u64, u64)>>,
    pub last_decision: Option<EnrollResponse>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportEstimator {
    #[default]
    Classic,
    Ols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportTest {
    #[default]
    Z,
    T,
    ExactMc,
    ExactFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub responses: BTreeMap<u64, f64>,
    #[serde(default)]
    pub estimator: ReportEstimator,
    #[serde(default)]
    pub test: ReportTest,
    #[serde(default)]
    pub beta0: f64,
    #[serde(default)]
    pub mc_draws: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub trial_id: String,
    pub estimate: EffectEstimate,
    pub test: TestResult,
    /// Subjects that entered the analysis.
    pub analysed: usize,
    /// Pairs dropped because a member had no response.
    pub incomplete_pairs: usize,
}

#[derive(Debug)]
struct Trial {
    id: String,
    spec: TrialSpec,
    lambda: f64,
    seed: u64,
    created_ms: u64,
    state: TrialState,
    keys: HashMap<String, u64>,
    /// Decisions in enrollment order, as returned.
    decisions: Vec<AllocationDecision>,
    log: EventLog,
}

impl Trial {
    fn status(&self) -> TrialStatus {
        if self.state.is_complete() {
            TrialStatus::Complete
        } else {
            TrialStatus::Open
        }
    }

    fn summary(&self) -> TrialSummary {
        TrialSummary {
            trial_id: self.id.clone(),
            status: self.status(),
            p: self.spec.p(),
            lambda: self.lambda,
            n_target: self.spec.n_target,
            t: self.state.t(),
            pairs: self.state.matches().len(),
            reservoir_size: self.state.reservoir().len(),
            created_ms: self.created_ms,
        }
    }

    fn response(&self, d: &AllocationDecision, replayed: bool) -> EnrollResponse {
        let masked = self.spec.mask_matches;
        EnrollResponse {
            trial_id: self.id.clone(),
            subject_id: d.subject_id,
            arm: d.arm,
            matched: (!masked).then_some(d.matched),
            partner: if masked { None } else { d.partner },
            min_stat: if masked { None } else { d.min_stat },
            threshold: if masked { None } else { d.threshold },
            masked,
            status: self.status(),
            t: self.state.t(),
            pairs: self.state.matches().len(),
            reservoir_size: self.state.reservoir().len(),
            replayed,
        }
    }

    fn decision_for(&self, id: u64) -> Option<&AllocationDecision> {
        id.checked_sub(1).and_then(|i| self.decisions.get(i as usize))
    }

    fn coerce(&self, input: &CovariateInput) -> Result<Vec<f64>, ServiceError> {
        let fields = &self.spec.covariates;
        let values = match input {
            CovariateInput::Ordered(v) => {
                if v.len() != fields.len() {
                    return Err(ServiceError::Schema(format!("expected {} values, got {}", fields.len(), v.len())));
                }
                v.clone()
            }
            CovariateInput::Named(map) => {
                if let Some(extra) = map.keys().find(|k| !fields.iter().any(|f| &f.name == *k)) {
                    return Err(ServiceError::Schema(format!("unknown covariate {extra:?}")));
                }
                fields
                    .iter()
                    .map(|f| {
                        map.get(&f.name)
                            .copied()
                            .ok_or_else(|| ServiceError::Schema(format!("missing covariate {:?}", f.name)))
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        for (f, v) in fields.iter().zip(&values) {
            if !v.is_finite() {
                return Err(ServiceError::Schema(format!("{:?} must be finite", f.name)));
            }
            if f.kind == CovariateKind::Binary && *v != 0.0 && *v != 1.0 {
                return Err(ServiceError::Schema(format!("{:?} is binary; got {v}", f.name)));
            }
        }
        Ok(values)
    }

    fn apply(&mut self, event: &LogEvent) -> Result<(), ServiceError> {
        let LogEvent::Enrolled {
            seq,
            event_key,
            covariates,
            decision,
            ..
        } = event
        else {
            return Err(ServiceError::Corrupt(format!("{}: creation event after the first line", self.id)));
        };
        if *seq != self.state.t() + 1 {
            return Err(ServiceError::Corrupt(format!("{}: event {seq} out of order", self.id)));
        }
        let replayed = self.state.allocate(covariates)?;
        if &replayed != decision {
            return Err(ServiceError::Corrupt(format!(
                "{}: replaying event {seq} gave a different allocation",
                self.id
            )));
        }
        if let Some(k) = event_key {
            self.keys.insert(k.clone(), *seq);
        }
        self.decisions.push(replayed);
        Ok(())
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// All trials under one data directory.
#[derive(Debug)]
pub struct TrialStore {
    dir: PathBuf,
    default_lambda: f64,
    trials: RwLock<BTreeMap<String, Arc<Mutex<Trial>>>>,
}

impl TrialStore {
    /// Opens (creating if needed) a data directory and rebuilds every trial
    /// from its log.
    pub fn open(dir: impl AsRef<Path>, default_lambda: f64) -> Result<Self, ServiceError> {
        if !(default_lambda > 0.0 && default_lambda < 1.0) {
            return Err(ServiceError::InvalidSpec(format!("default lambda must lie in (0, 1), got {default_lambda}")));
        }
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| ServiceError::Storage(format!("{}: {e}", dir.display())))?;
        let mut trials = BTreeMap::new();
        let entries = fs::read_dir(&dir).map_err(|e| ServiceError::Storage(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| ServiceError::Storage(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let trial = Self::recover(&path)?;
            trials.insert(trial.id.clone(), Arc::new(Mutex::new(trial)));
        }
        Ok(Self {
            dir,
            default_lambda,
            trials: RwLock::new(trials),
        })
    }

    fn recover(path: &Path) -> Result<Trial, ServiceError> {
        let (log, events) = EventLog::open(path)?;
        let mut iter = events.iter();
        let Some(LogEvent::Created {
            version,
            trial_id,
            spec,
            lambda,
            seed,
            created_ms,
        }) = iter.next()
        else {
            return Err(ServiceError::Corrupt(format!("{}: missing creation event", path.display())));
        };
        if *version != LOG_VERSION {
            return Err(ServiceError::Corrupt(format!("{}: unsupported log version {version}", path.display())));
        }
        let state = TrialState::new(EngineConfig::new(spec.p(), *lambda, spec.n_target, *seed))?;
        let mut trial = Trial {
            id: trial_id.clone(),
            spec: spec.clone(),
            lambda: *lambda,
            seed: *seed,
            created_ms: *created_ms,
            state,
            keys: HashMap::new(),
            decisions: Vec::new(),
            log,
        };
        for ev in iter {
            trial.apply(ev)?;
        }
        Ok(trial)
    }

    pub fn data_dir(&self) -> &Path {
        &self.dir
    }

    pub fn default_lambda(&self) -> f64 {
        self.default_lambda
    }

    fn trial(&self, id: &str) -> Result<Arc<Mutex<Trial>>, ServiceError> {
        self.trials
            .read()
            .expect("trial map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.into()))
    }

    pub fn create(&self, spec: TrialSpec) -> Result<TrialView, ServiceError> {
        spec.validate()?;
        let lambda = spec.lambda.unwrap_or(self.default_lambda);
        let seed = spec.seed.unwrap_or_else(rand::random);
        let config = EngineConfig::new(spec.p(), lambda, spec.n_target, seed);
        config.validate().map_err(|e| ServiceError::InvalidSpec(e.to_string()))?;

        let mut map = self.trials.write().expect("trial map lock");
        let id = match &spec.trial_id {
            Some(id) if map.contains_key(id) => return Err(ServiceError::Conflict(id.clone())),
            Some(id) => id.clone(),
            None => loop {
                let candidate = format!("t-{:012x}", rand::random::<u64>() & 0xffff_ffff_ffff);
                if !map.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        let path = self.dir.join(format!("{id}.jsonl"));
        if path.exists() {
            return Err(ServiceError::Conflict(id));
        }
        let created_ms = now_ms();
        let mut log = EventLog::create(&path)?;
        log.append(&LogEvent::Created {
            version: LOG_VERSION,
            trial_id: id.clone(),
            spec: spec.clone(),
            lambda,
            seed,
            created_ms,
        })?;
        let trial = Trial {
            id: id.clone(),
            spec,
            lambda,
            seed,
            created_ms,
            state: TrialState::new(config)?,
            keys: HashMap::new(),
            decisions: Vec::new(),
            log,
        };
        let view = view_of(&trial);
        map.insert(id, Arc::new(Mutex::new(trial)));
        Ok(view)
    }

    /// Allocates one entrant. The event is durable before this returns.
    pub fn enroll(&self, id: &str, req: &EnrollRequest) -> Result<EnrollResponse, ServiceError> {
        let handle = self.trial(id)?;
        let mut trial = handle.lock().expect("trial lock");
        if let Some(key) = &req.event_key {
            if let Some(&seq) = trial.keys.get(key) {
                let d = trial.decision_for(seq).expect("recorded subject").clone();
                return Ok(trial.response(&d, true));
            }
        }
        if trial.state.is_complete() {
            return Err(ServiceError::TrialComplete(trial.id.clone()));
        }
        let x = trial.coerce(&req.covariates)?;
        let mut next = trial.state.clone();
        let decision = next.allocate(&x)?;
        let event = LogEvent::Enrolled {
            seq: decision.subject_id,
            event_key: req.event_key.clone(),
            covariates: x,
            decision: decision.clone(),
            timestamp_ms: now_ms(),
        };
        trial.log.append(&event)?;
        trial.state = next;
        trial.decisions.push(decision.clone());
        if let Some(k) = &req.event_key {
            trial.keys.insert(k.clone(), decision.subject_id);
        }
        Ok(trial.response(&decision, false))
    }

    pub fn get(&self, id: &str) -> Result<TrialView, ServiceError> {
        let handle = self.trial(id)?;
        let trial = handle.lock().expect("trial lock");
        Ok(view_of(&trial))
    }

    pub fn list(&self) -> Vec<TrialSummary> {
        let handles: Vec<_> = self.trials.read().expect("trial map lock").values().cloned().collect();
        handles.iter().map(|h| h.lock().expect("trial lock").summary()).collect()
    }

    /// Engine snapshot of the current state.
    pub fn snapshot(&self, id: &str) -> Result<String, ServiceError> {
        let handle = self.trial(id)?;
        let trial = handle.lock().expect("trial lock");
        Ok(trial.state.to_snapshot())
    }

    pub fn report(&self, id: &str, req: &ReportRequest) -> Result<ReportResponse, ServiceError> {
        let (split, trial_id, seed) = {
            let handle = self.trial(id)?;
            let trial = handle.lock().expect("trial lock");
            (trial.state.split(), trial.id.clone(), trial.seed)
        };
        let t = split.pairs.len() * 2 + split.reservoir.len();
        if let Some(bad) = req.responses.keys().find(|&&k| k == 0 || k > t as u64) {
            return Err(ServiceError::BadRequest(format!("subject {bad} is not enrolled")));
        }
        if let Some((k, _)) = req.responses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ServiceError::BadRequest(format!("response for subject {k} is not finite")));
        }
        if !req.beta0.is_finite() {
            return Err(ServiceError::BadRequest("beta0 must be finite".into()));
        }
        let has = |s: &Subject| req.responses.contains_key(&s.id);
        let mut analysed = split.clone();
        analysed.pairs.retain(|(a, b)| has(a) && has(b));
        analysed.reservoir.retain(has);
        let incomplete_pairs = split.pairs.len() - analysed.pairs.len();
        let n = analysed.pairs.len() * 2 + analysed.reservoir.len();
        if n == 0 {
            return Err(ServiceError::Estimator(EstimatorError::InsufficientData(
                "no responses for any analysable subject".into(),
            )));
        }
        let (pairs, reservoir) = samples_from_split(&analysed, |sid| req.responses.get(&sid).copied())?;
        let estimate = match req.estimator {
            ReportEstimator::Classic => classic_combined(&pairs, &reservoir)?,
            ReportEstimator::Ols => ols_combined(&pairs, &reservoir)?,
        };
        let statistic = match req.estimator {
            ReportEstimator::Classic => ExactStatistic::Classic,
            ReportEstimator::Ols => ExactStatistic::Ols,
        };
        let test = match req.test {
            ReportTest::Z => z_test_with(&estimate, req.beta0, ZReference::Normal)?,
            ReportTest::T => z_test_with(&estimate, req.beta0, ZReference::StudentT)?,
            ReportTest::ExactMc => {
                let draws = req.mc_draws.unwrap_or(crate::inference::DEFAULT_MC_DRAWS);
                let opts = ExactOptions::monte_carlo(draws, req.seed.unwrap_or(seed)).with_statistic(statistic);
                exact_test(&pairs, &reservoir, req.beta0, opts)?
            }
            ReportTest::ExactFull => {
                exact_test(&pairs, &reservoir, req.beta0, ExactOptions::full().with_statistic(statistic))?
            }
        };
        Ok(ReportResponse {
            trial_id,
            estimate,
            test,
            analysed: n,
            incomplete_pairs,
        })
    }
}

fn view_of(trial: &Trial) -> TrialView {
    let masked = trial.spec.mask_matches;
    let last = trial.decisions.last().map(|d| trial.response(d, false));
    TrialView {
        summary: trial.summary(),
        covariates: trial.spec.covariates.clone(),
        mask_matches: masked,
        seed: trial.seed,
        subjects: (!masked).then(|| {
            trial
                .state
                .subjects()
                .iter()
                .map(|s| SubjectView {
                    id: s.id,
                    covariates: s.covariates.clone(),
                    arm: s.arm,
                    partner: s.match_partner,
                })
                .collect()
        }),
        reservoir: (!masked).then(|| trial.state.reservoir().to_vec()),
        matches: (!masked).then(|| trial.state.matches().to_vec()),
        last_decision: last,
    }
}
