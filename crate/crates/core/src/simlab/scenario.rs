use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::engine::Arm;

/// Response surfaces of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Nonlinear: linear, quadratic and interaction terms.
    NL,
    /// Linear in both covariates.
    LI,
    /// Covariates carry no signal.
    ZE,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::NL, Scenario::LI, Scenario::ZE];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::NL => "NL",
            Scenario::LI => "LI",
            Scenario::ZE => "ZE",
        }
    }

    /// Covariate part of the response (no treatment, no noise).
    pub fn baseline(self, x: &[f64; 2]) -> f64 {
        let [x1, x2] = *x;
        match self {
            Scenario::NL => x1 + x2 + x1 * x1 + x2 * x2 + x1 * x2,
            Scenario::LI => 2.0 * x1 + 2.0 * x2,
            Scenario::ZE => 0.0,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NL" => Ok(Scenario::NL),
            "LI" => Ok(Scenario::LI),
            "ZE" => Ok(Scenario::ZE),
            other => Err(SimError::InvalidSpec(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub beta_t: f64,
    pub sigma2_e: f64,
    pub n: usize,
    pub lambda: f64,
    pub replications: usize,
    pub mc_draws: u64,
    pub alpha: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Defaults of the published study: `beta_T = 1`, `sigma2_e = 3`,
    /// `lambda = 0.10`, 1000 replications and draws, `alpha = 0.05`.
    pub fn new(scenario: Scenario, n: usize) -> Self {
        Self {
            scenario,
            beta_t: 1.0,
            sigma2_e: 3.0,
            n,
            lambda: 0.10,
            replications: 1000,
            mc_draws: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma2_e > 0.0 && self.sigma2_e.is_finite()) {
            return Err(SimError::InvalidSpec(format!("sigma2_e must be positive, got {}", self.sigma2_e)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(SimError::InvalidSpec(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SimError::InvalidSpec(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n < 4 {
            return Err(SimError::InvalidSpec(format!("n must be at least 4, got {}", self.n)));
        }
        if self.replications == 0 {
            return Err(SimError::InvalidSpec("replications must be positive".into()));
        }
        if !self.beta_t.is_finite() {
            return Err(SimError::InvalidSpec("beta_t must be finite".into()));
        }
        Ok(())
    }
}

/// One simulated entrant: covariates plus the noise draw, so the response
/// under either arm is fixed before allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSubject {
    pub x: [f64; 2],
    pub noise: f64,
}

impl SimSubject {
    pub fn response(&self, spec: &ScenarioSpec, arm: Arm) -> f64 {
        let treat = if arm.is_treatment() { spec.beta_t } else { 0.0 };
        treat + spec.scenario.baseline(&self.x) + self.noise
    }
}

pub fn generate_trial<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Vec<SimSubject> {
    let noise = Normal::new(0.0, spec.sigma2_e.sqrt()).expect("validated sigma2_e");
    (0..spec.n)
        .map(|_| {
            let x = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
            SimSubject {
                x,
                noise: noise.sample(rng),
            }
        })
        .collect()
}
