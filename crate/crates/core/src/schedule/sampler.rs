//! Categorical task sampling proportional to stage weights.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::spec::StageSpec;
use crate::error::{Error, Result};

/// I.i.d. draws of task indices with probability proportional to weight.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    dist: WeightedIndex<f64>,
    probs: Vec<f64>,
}

impl TaskSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("invalid task weights {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("task weights sum to zero".into()));
        }
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(TaskSampler {
            dist,
            probs: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn for_stage(stage: &StageSpec) -> Result<Self> {
        let weights: Vec<f64> = stage.tasks.iter().map(|t| t.weight).collect();
        Self::new(&weights)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }

    /// An endless stream of draws.
    pub fn iter<'a, R: Rng>(&'a self, rng: &'a mut R) -> impl Iterator<Item = usize> + 'a {
        std::iter::repeat_with(move || self.sample(rng))
    }
}
