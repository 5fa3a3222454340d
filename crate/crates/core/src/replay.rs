//! Replaying completed randomized trials through the matching rule, keeping
//! only entrants whose historical arm agrees with what matching requires.

use std::fs::File;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::competitors::complete_randomization;
use crate::engine::{Arm, EngineConfig, EngineError, Screening, TrialState};
use crate::estimators::{classic_combined, samples_from_split, EffectEstimate};
use crate::numstat::mean;
use crate::simlab::{derive_seed, generate_trial, ScenarioSpec};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("no records to replay")]
    Empty,
    #[error("input error: {0}")]
    Input(String),
    #[error("requested {requested} records but only {available} are available")]
    InsufficientRecords { requested: usize, available: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("output error: {0}")]
    Output(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalRecord {
    pub covariates: Vec<f64>,
    pub original_arm: Arm,
    pub response: f64,
}

/// Column mapping for delimited input.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvLayout {
    pub covariates: Vec<String>,
    pub arm: String,
    pub response: String,
    pub treatment_label: String,
    pub control_label: String,
    pub delimiter: u8,
}

impl CsvLayout {
    pub fn new(covariates: Vec<String>, arm: &str, response: &str) -> Self {
        Self {
            covariates,
            arm: arm.into(),
            response: response.into(),
            treatment_label: "T".into(),
            control_label: "C".into(),
            delimiter: b',',
        }
    }
}

/// Reads records from delimited text with a header row. Empty or
/// unparseable cells are rejected.
pub fn load_csv<R: io::Read>(input: R, layout: &CsvLayout) -> Result<Vec<HistoricalRecord>, ReplayError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(layout.delimiter)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers().map_err(|e| ReplayError::Input(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ReplayError::Input(format!("missing column {name:?}")))
    };
    let cov_idx = layout.covariates.iter().map(|c| column(c)).collect::<Result<Vec<_>, _>>()?;
    let arm_idx = column(&layout.arm)?;
    let y_idx = column(&layout.response)?;

    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| ReplayError::Input(e.to_string()))?;
        let number = |i: usize, name: &str| -> Result<f64, ReplayError> {
            let cell = rec.get(i).unwrap_or("");
            if cell.is_empty() {
                return Err(ReplayError::Input(format!("line {line}: missing value for {name:?}")));
            }
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ReplayError::Input(format!("line {line}: {name:?} is not a number: {cell:?}")))
        };
        let covariates = cov_idx
            .iter()
            .zip(&layout.covariates)
            .map(|(&i, name)| number(i, name))
            .collect::<Result<Vec<_>, _>>()?;
        let arm_cell = rec.get(arm_idx).unwrap_or("");
        let original_arm = if arm_cell == layout.treatment_label {
            Arm::Treatment
        } else if arm_cell == layout.control_label {
            Arm::Control
        } else {
            return Err(ReplayError::Input(format!("line {line}: unrecognised arm {arm_cell:?}")));
        };
        records.push(HistoricalRecord {
            covariates,
            original_arm,
            response: number(y_idx, &layout.response)?,
        });
    }
    Ok(records)
}

pub fn load_csv_path(path: &Path, layout: &CsvLayout) -> Result<Vec<HistoricalRecord>, ReplayError> {
    let file = File::open(path).map_err(|e| ReplayError::Input(format!("{}: {e}", path.display())))?;
    load_csv(file, layout)
}

/// A completed trial with covariates from one of the simulation scenarios
/// and arms from a fair coin.
pub fn synthetic_rct(spec: &ScenarioSpec, seed: u64) -> Vec<HistoricalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = generate_trial(spec, &mut rng);
    subjects
        .iter()
        .map(|s| {
            let arm = complete_randomization(&mut rng);
            HistoricalRecord {
                covariates: s.x.to_vec(),
                original_arm: arm,
                response: s.response(spec, arm),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayOptions {
    pub lambda: f64,
    /// Whether a discarded entrant's covariates still enter the running
    /// covariance.
    pub discarded_update_covariance: bool,
    pub pinv_tolerance: Option<f64>,
}

impl ReplayOptions {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            discarded_update_covariance: true,
            pinv_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRun {
    /// One character per entrant: `.` reservoir, `o` kept match, `x` discarded.
    pub trace: String,
    /// Input positions of retained entrants, in arrival order.
    pub retained: Vec<usize>,
    pub pairs: usize,
    pub reservoir: usize,
    pub discarded: usize,
    /// Entrants whose covariates entered the running covariance.
    pub observed: u64,
    /// Combined estimate on the retained subset.
    pub estimate: Option<EffectEstimate>,
    /// Difference in means over every entrant with its original arm.
    pub baseline: Option<f64>,
}

impl ReplayRun {
    pub fn actual_n(&self) -> usize {
        self.retained.len()
    }

    /// Share of match attempts whose entrant was discarded.
    pub fn discard_fraction(&self) -> Option<f64> {
        let attempts = self.pairs + self.discarded;
        (attempts > 0).then(|| self.discarded as f64 / attempts as f64)
    }
}

fn mean_difference(records: &[HistoricalRecord]) -> Option<f64> {
    let (t, c): (Vec<&HistoricalRecord>, Vec<&HistoricalRecord>) =
        records.iter().partition(|r| r.original_arm.is_treatment());
    if t.is_empty() || c.is_empty() {
        return None;
    }
    let yt: Vec<f64> = t.iter().map(|r| r.response).collect();
    let yc: Vec<f64> = c.iter().map(|r| r.response).collect();
    Some(mean(&yt) - mean(&yc))
}

/// Runs the keep/discard protocol over `records` in the given order.
pub fn replay_once(records: &[HistoricalRecord], opts: &ReplayOptions) -> Result<ReplayRun, ReplayError> {
    let first = records.first().ok_or(ReplayError::Empty)?;
    let p = first.covariates.len();
    let mut config = EngineConfig::new(p, opts.lambda, records.len() as u64, 0);
    config.pinv_tolerance = opts.pinv_tolerance;
    let mut state = TrialState::new(config)?;
    let mut trace = String::with_capacity(records.len());
    let mut retained = Vec::new();
    let mut discarded = 0;
    for (i, rec) in records.iter().enumerate() {
        let screening = state.screen(&rec.covariates)?;
        match screening {
            Screening::Match { partner, .. } => {
                let required = state.subject(partner).expect("reservoir member").arm.opposite();
                if required == rec.original_arm {
                    state.admit_match(&rec.covariates, partner, screening)?;
                    retained.push(i);
                    trace.push('o');
                } else {
                    if opts.discarded_update_covariance {
                        state.observe_only(&rec.covariates)?;
                    }
                    discarded += 1;
                    trace.push('x');
                }
            }
            Screening::Randomize | Screening::NoMatch { .. } => {
                state.admit_reservoir(&rec.covariates, rec.original_arm, screening)?;
                retained.push(i);
                trace.push('.');
            }
        }
    }
    let split = state.split();
    // engine ids are 1-based positions in `retained`
    let estimate = samples_from_split(&split, |id| retained.get(id as usize - 1).map(|&i| records[i].response))
        .ok()
        .and_then(|(pairs, res)| classic_combined(&pairs, &res).ok());
    Ok(ReplayRun {
        trace,
        pairs: split.pairs.len(),
        reservoir: split.reservoir.len(),
        retained,
        discarded,
        observed: state.observed(),
        estimate,
        baseline: mean_difference(records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub purported_n: usize,
    pub actual_n: f64,
    /// `var(baseline) / var(combined)` across runs.
    pub efficiency: f64,
    /// `100 * (1 - 1 / efficiency)`.
    pub reduction_pct: f64,
    pub runs: usize,
    /// Runs where an estimate was unavailable.
    pub excluded: usize,
    pub discard_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub purported_n: usize,
    pub run: usize,
    pub actual_n: usize,
    pub pairs: usize,
    pub reservoir: usize,
    pub discarded: usize,
    pub estimate: Option<f64>,
    pub baseline: Option<f64>,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub lambda: f64,
    pub rows: Vec<ReplayRow>,
    pub runs: Vec<RunRecord>,
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// For each purported size, replays `runs` random ordered subsets of the
/// records and compares estimator variances across runs.
pub fn replay_study(
    records: &[HistoricalRecord],
    opts: &ReplayOptions,
    n_values: &[usize],
    runs: usize,
    seed: u64,
) -> Result<ReplayReport, ReplayError> {
    if records.is_empty() {
        return Err(ReplayError::Empty);
    }
    let mut report = ReplayReport {
        lambda: opts.lambda,
        rows: Vec::new(),
        runs: Vec::new(),
    };
    for &n in n_values {
        if n > records.len() || n < 2 {
            return Err(ReplayError::InsufficientRecords {
                requested: n,
                available: records.len(),
            });
        }
        let results: Vec<ReplayRun> = (0..runs)
            .into_par_iter()
            .map(|run| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[n as u64, run as u64]));
                let mut order: Vec<usize> = (0..records.len()).collect();
                order.shuffle(&mut rng);
                let subset: Vec<HistoricalRecord> = order[..n].iter().map(|&i| records[i].clone()).collect();
                replay_once(&subset, opts)
            })
            .collect::<Result<_, _>>()?;

        let paired: Vec<(f64, f64)> = results
            .iter()
            .filter_map(|r| Some((r.estimate.as_ref()?.estimate, r.baseline?)))
            .collect();
        let (sm, base): (Vec<f64>, Vec<f64>) = paired.iter().copied().unzip();
        let efficiency = if sm.len() >= 2 { sample_var(&base) / sample_var(&sm) } else { f64::NAN };
        let (kept, tried) = results
            .iter()
            .fold((0, 0), |(k, t), r| (k + r.discarded, t + r.discarded + r.pairs));
        report.rows.push(ReplayRow {
            purported_n: n,
            actual_n: results.iter().map(|r| r.actual_n() as f64).sum::<f64>() / runs.max(1) as f64,
            efficiency,
            reduction_pct: 100.0 * (1.0 - 1.0 / efficiency),
            runs,
            excluded: runs - sm.len(),
            discard_fraction: if tried == 0 { f64::NAN } else { kept as f64 / tried as f64 },
        });
        report.runs.extend(results.into_iter().enumerate().map(|(run, r)| RunRecord {
            purported_n: n,
            run,
            actual_n: r.actual_n(),
            pairs: r.pairs,
            reservoir: r.reservoir,
            discarded: r.discarded,
            estimate: r.estimate.map(|e| e.estimate),
            baseline: r.baseline,
            trace: r.trace,
        }));
    }
    Ok(report)
}

impl ReplayReport {
    /// The four summary columns plus bookkeeping, one row per purported n.
    pub fn write_rows<W: io::Write>(&self, out: W) -> Result<(), ReplayError> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| ReplayError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| ReplayError::Output(e.to_string()))
    }

    pub fn write_traces<W: io::Write>(&self, out: W) -> Result<(), ReplayError> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        for run in &self.runs {
            w.serialize(run).map_err(|e| ReplayError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| ReplayError::Output(e.to_string()))
    }

    /// One line per run: the marks followed by the retained count.
    pub fn trace_lines(&self) -> Vec<String> {
        self.runs.iter().map(|r| format!("{} ({})", r.trace, r.actual_n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::Scenario;

    fn rec(x: f64, arm: Arm, y: f64) -> HistoricalRecord {
        HistoricalRecord {
            covariates: vec![x],
            original_arm: arm,
            response: y,
        }
    }

    #[test]
    fn single_arm_history_keeps_no_pairs() {
        let records: Vec<_> = (0..12).map(|i| rec(i as f64 * 0.01, Arm::Treatment, 1.0)).collect();
        let run = replay_once(&records, &ReplayOptions::new(0.5)).unwrap();
        assert_eq!(run.pairs, 0);
        assert!(run.trace.starts_with('.'));
        assert!(run.trace.contains('x'));
        assert!(!run.trace.contains('o'));
    }

    #[test]
    fn identical_covariates_alternating_arms_all_kept() {
        let records: Vec<_> = (0..10)
            .map(|i| rec(2.0, if i % 2 == 0 { Arm::Treatment } else { Arm::Control }, i as f64))
            .collect();
        let run = replay_once(&records, &ReplayOptions::new(0.1)).unwrap();
        assert_eq!(run.trace, ".o.o.o.o.o");
        assert_eq!(run.pairs, 5);
        assert_eq!(run.actual_n(), 10);
        assert_eq!(run.discarded, 0);
    }

    #[test]
    fn discarded_partner_stays_available() {
        // second entrant disagrees with the required arm, third agrees
        let records = vec![rec(0.0, Arm::Treatment, 0.0), rec(0.0, Arm::Treatment, 0.0), rec(0.0, Arm::Control, 0.0)];
        let run = replay_once(&records, &ReplayOptions::new(0.1)).unwrap();
        assert_eq!(run.trace, ".xo");
        assert_eq!(run.retained, vec![0, 2]);
    }

    #[test]
    fn covariance_switch_changes_observed_count() {
        let records = vec![rec(0.0, Arm::Treatment, 0.0), rec(0.0, Arm::Treatment, 0.0), rec(3.0, Arm::Control, 0.0)];
        for (flag, observed) in [(true, 3), (false, 2)] {
            let mut o = ReplayOptions::new(0.1);
            o.discarded_update_covariance = flag;
            let run = replay_once(&records, &o).unwrap();
            assert_eq!(run.trace, ".x.");
            assert_eq!(run.observed, observed);
        }
    }

    #[test]
    fn accounting_reconciles() {
        let spec = ScenarioSpec::new(Scenario::NL, 120);
        let records = synthetic_rct(&spec, 4);
        let run = replay_once(&records, &ReplayOptions::new(0.1)).unwrap();
        let dots = run.trace.matches('.').count();
        let os = run.trace.matches('o').count();
        let xs = run.trace.matches('x').count();
        assert_eq!(dots + os + xs, records.len());
        assert_eq!(os, run.pairs);
        assert_eq!(xs, run.discarded);
        assert_eq!(dots - os, run.reservoir);
        assert_eq!(2 * run.pairs + run.reservoir, run.actual_n());
        for w in run.retained.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn study_is_deterministic() {
        let spec = ScenarioSpec::new(Scenario::LI, 200);
        let records = synthetic_rct(&spec, 8);
        let opts = ReplayOptions::new(0.1);
        let a = replay_study(&records, &opts, &[40, 60], 5, 3).unwrap();
        let b = replay_study(&records, &opts, &[40, 60], 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert!(a.rows.iter().all(|r| r.actual_n <= r.purported_n as f64));
        assert!(replay_study(&records, &opts, &[201], 1, 0).is_err());
        assert!(matches!(replay_study(&[], &opts, &[2], 1, 0), Err(ReplayError::Empty)));
    }

    #[test]
    fn csv_loading() {
        let text = "id,age,smoker,group,y\n1,40.5,1,trt,3.2\n2,51,0,ctl,1.0\n";
        let mut layout = CsvLayout::new(vec!["age".into(), "smoker".into()], "group", "y");
        layout.treatment_label = "trt".into();
        layout.control_label = "ctl".into();
        let recs = load_csv(text.as_bytes(), &layout).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].covariates, vec![40.5, 1.0]);
        assert_eq!(recs[1].original_arm, Arm::Control);

        let missing = "age,smoker,group,y\n40,,trt,1\n";
        assert!(matches!(load_csv(missing.as_bytes(), &layout), Err(ReplayError::Input(m)) if m.contains("missing")));
        let bad_arm = "age,smoker,group,y\n40,1,X,1\n";
        assert!(load_csv(bad_arm.as_bytes(), &layout).is_err());
        let no_col = "age,group,y\n40,trt,1\n";
        assert!(load_csv(no_col.as_bytes(), &layout).is_err());
    }

    #[test]
    fn binary_covariates_replay_without_failure() {
        // a constant binary column makes the covariance singular
        let spec = ScenarioSpec::new(Scenario::LI, 80);
        let records: Vec<_> = synthetic_rct(&spec, 2)
            .into_iter()
            .map(|mut r| {
                r.covariates.push(1.0);
                r
            })
            .collect();
        let run = replay_once(&records, &ReplayOptions::new(0.1)).unwrap();
        assert!(run.pairs > 0);
    }
}
