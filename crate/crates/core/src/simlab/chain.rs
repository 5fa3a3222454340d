use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SimError;

/// Birth-death chain on the number of matchable pairs `s` among `K`
/// quantile cells, `s` in `0..=K/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirChain {
    pub k: u32,
    pub transition: DMatrix<f64>,
}

impl ReservoirChain {
    pub fn states(&self) -> usize {
        self.transition.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub k: u32,
    pub distribution: Vec<f64>,
    /// Expected number of items in the reservoir, `sum_s pi_s * 2s`.
    pub mean_items: f64,
}

pub fn chain_transition(k: u32) -> Result<ReservoirChain, SimError> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(SimError::InvalidSpec(format!("K must be even and at least 2, got {k}")));
    }
    let kf = f64::from(k);
    let k2 = kf * kf;
    let top = (k / 2) as usize;
    let mut p = DMatrix::zeros(top + 1, top + 1);
    for s in 0..=top {
        let sf = s as f64;
        if s > 0 {
            p[(s, s - 1)] = 2.0 * sf * (2.0 * sf - 1.0) / k2;
        }
        p[(s, s)] = (kf * (4.0 * sf + 1.0) - 8.0 * sf * sf) / k2;
        if s < top {
            p[(s, s + 1)] = (k2 - kf * (4.0 * sf + 1.0) + 2.0 * sf * (2.0 * sf + 1.0)) / k2;
        }
    }
    Ok(ReservoirChain { k, transition: p })
}

/// Solves `pi P = pi`, `sum pi = 1` directly.
pub fn chain_stationary(chain: &ReservoirChain) -> Result<ChainSummary, SimError> {
    let n = chain.states();
    let mut a = chain.transition.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| SimError::Numeric("singular stationary system".into()))?;
    let distribution: Vec<f64> = pi.iter().copied().collect();
    let mean_items = distribution.iter().enumerate().map(|(s, w)| w * 2.0 * s as f64).sum();
    Ok(ChainSummary {
        k: chain.k,
        distribution,
        mean_items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cell_chain() {
        let c = chain_transition(2).unwrap();
        assert_eq!(c.transition[(0, 0)], 0.5);
        assert_eq!(c.transition[(0, 1)], 0.5);
        assert_eq!(c.transition[(1, 0)], 0.5);
        let s = chain_stationary(&c).unwrap();
        assert!((s.distribution[0] - 0.5).abs() < 1e-15);
        assert!((s.mean_items - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_stochastic_and_symmetric() {
        for k in (2..=40).step_by(2) {
            let c = chain_transition(k).unwrap();
            let top = c.states() - 1;
            for s in 0..=top {
                let row: f64 = c.transition.row(s).iter().sum();
                assert!((row - 1.0).abs() < 1e-14, "K={k} s={s}");
                for j in 0..=top {
                    assert!(c.transition[(s, j)] >= 0.0);
                    assert!((c.transition[(s, j)] - c.transition[(top - s, top - j)]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn matches_detailed_balance() {
        // birth-death chains are reversible: pi_{s+1} / pi_s = P(s, s+1) / P(s+1, s)
        for k in [4u32, 10, 26] {
            let c = chain_transition(k).unwrap();
            let n = c.states();
            let mut w = vec![1.0];
            for s in 0..n - 1 {
                let next = w[s] * c.transition[(s, s + 1)] / c.transition[(s + 1, s)];
                w.push(next);
            }
            let total: f64 = w.iter().sum();
            let st = chain_stationary(&c).unwrap();
            for (a, b) in st.distribution.iter().zip(&w) {
                assert!((a - b / total).abs() < 1e-12);
            }
            let mid = n - 1;
            for s in 0..n {
                assert!((st.distribution[s] - st.distribution[mid - s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_odd_or_small() {
        assert!(chain_transition(3).is_err());
        assert!(chain_transition(0).is_err());
    }
}
