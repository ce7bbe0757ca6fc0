//! Most-popular ranking and inverse propensity weights.

use crate::dataset::{ItemId, SplitDataset, UserId};
use crate::models::Scorer;
use crate::{Error, Result};

pub const DEFAULT_IPS_ETA: f64 = 0.5;
pub const DEFAULT_IPS_CLIP: f64 = 10.0;

/// Non-personalized ranking by train-set positive counts.
#[derive(Clone, Debug)]
pub struct MostPop {
    counts: Vec<u32>,
}

impl MostPop {
    pub fn new(counts: Vec<u32>) -> Self {
        MostPop { counts }
    }

    pub fn from_dataset(ds: &SplitDataset) -> Self {
        Self::new(ds.popularity().to_vec())
    }

    pub fn score(&self, item: ItemId) -> f64 {
        self.counts.get(item).copied().unwrap_or(0) as f64
    }
}

impl Scorer for MostPop {
    fn name(&self) -> &str {
        "mostpop"
    }

    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn score_candidates(&self, _user: UserId, _history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&v| self.score(v)).collect())
    }
}

/// User-independent propensities `p_v = (n_v / n_max)^eta`.
#[derive(Clone, Debug)]
pub struct PropensityTable {
    propensity: Vec<f64>,
    eta: f64,
    clip_max: f64,
}

impl PropensityTable {
    pub fn new(counts: &[u32], eta: f64, clip_max: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("ips_eta must be >= 0, got {eta}")));
        }
        if !(clip_max >= 1.0) {
            return Err(Error::invalid(format!("ips_clip must be >= 1, got {clip_max}")));
        }
        let n_max = counts.iter().copied().max().unwrap_or(0);
        if n_max == 0 {
            return Err(Error::invalid("propensities need at least one observed item"));
        }
        let propensity = counts.iter().map(|&n| (n as f64 / n_max as f64).powf(eta)).collect();
        Ok(PropensityTable {
            propensity,
            eta,
            clip_max,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `p_v`; zero for unseen items.
    pub fn propensity(&self, item: ItemId) -> f64 {
        self.propensity[item]
    }

    /// `min(1/p_v, clip_max)`, and `clip_max` for unseen items.
    pub fn weight(&self, item: ItemId) -> f64 {
        let p = self.propensity[item];
        if p > 0.0 {
            (1.0 / p).min(self.clip_max)
        } else {
            self.clip_max
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mostpop_orders_by_count_then_id() {
        let mp = MostPop::new(vec![3, 500, 0, 3]);
        assert_eq!(mp.score(1), 500.0);
        assert_eq!(mp.score(2), 0.0);
        let scores = mp.score_candidates(0, &[], &[0, 1, 2, 3]).unwrap();
        let top = crate::models::top_k_by_score(&[0, 1, 2, 3], &scores, 4).unwrap();
        assert_eq!(top, vec![1, 0, 3, 2]);
    }

    #[test]
    fn ips_weight_examples() {
        let t = PropensityTable::new(&[400, 100, 0], 0.5, 10.0).unwrap();
        assert_eq!(t.weight(0), 1.0);
        assert!((t.weight(1) - 2.0).abs() < 1e-12);
        assert_eq!(t.weight(2), 10.0);
        let t = PropensityTable::new(&[10000, 1], 1.0, 10.0).unwrap();
        assert_eq!(t.weight(1), 10.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(PropensityTable::new(&[0, 0], 0.5, 10.0).is_err());
        assert!(PropensityTable::new(&[1], -1.0, 10.0).is_err());
        assert!(PropensityTable::new(&[1], 0.5, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn weights_are_bounded(counts in prop::collection::vec(0u32..1000, 1..40),
                               eta in 0.0f64..2.0, clip in 1.0f64..50.0) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let t = PropensityTable::new(&counts, eta, clip).unwrap();
            let max_p = (0..counts.len()).map(|i| t.propensity(i)).fold(0.0, f64::max);
            prop_assert_eq!(max_p, 1.0);
            for (i, &c) in counts.iter().enumerate() {
                let w = t.weight(i);
                prop_assert!(w <= clip);
                if c > 0 { prop_assert!(w >= 1.0); }
            }
        }

        #[test]
        fn zero_eta_gives_unit_weights(counts in prop::collection::vec(1u32..1000, 1..40)) {
            let t = PropensityTable::new(&counts, 0.0, 10.0).unwrap();
            prop_assert!((0..counts.len()).all(|i| t.weight(i) == 1.0));
        }
    }
}
