use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Uniform,
    ClassBalanced,
    GroupBalanced,
}

/// Minibatch index sampler. Draws are i.i.d. with replacement; balanced
/// schemes pick a stratum uniformly, then an example uniformly within it.
#[derive(Clone, Debug)]
pub struct Sampler {
    scheme: Sampling,
    n: usize,
    strata: Vec<Vec<usize>>,
}

impl Sampler {
    /// Class-balanced sampling needs every class present. Group-balanced
    /// sampling uses the nonempty groups, since a group missing from the
    /// training split is the attribute-generalization setting itself.
    pub fn new(data: &Dataset, scheme: Sampling) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyStratum("cannot sample from an empty dataset".into()));
        }
        let strata = match scheme {
            Sampling::Uniform => Vec::new(),
            Sampling::ClassBalanced => {
                let members = data.class_members();
                if let Some(k) = members.iter().position(Vec::is_empty) {
                    return Err(Error::EmptyStratum(format!(
                        "class-balanced sampling: class {k} has no examples"
                    )));
                }
                members
            }
            Sampling::GroupBalanced => data
                .group_members()
                .into_iter()
                .filter(|m| !m.is_empty())
                .collect(),
        };
        Ok(Self {
            scheme,
            n: data.len(),
            strata,
        })
    }

    pub fn scheme(&self) -> Sampling {
        self.scheme
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        match self.scheme {
            Sampling::Uniform => rng.random_range(0..self.n),
            _ => {
                let s = &self.strata[rng.random_range(0..self.strata.len())];
                s[rng.random_range(0..s.len())]
            }
        }
    }

    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..batch_size).map(|_| self.draw(rng)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    None,
    ClassInverse,
    GroupInverse,
    SqrtClassInverse,
    SqrtGroupInverse,
    /// The per-example weights stored on the dataset.
    Custom,
}

/// Rescales so the weights average to 1 over the dataset.
pub fn normalize_mean_one(weights: &mut [f64]) -> Result<()> {
    let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::InvalidData("weights must have a positive finite mean".into()));
    }
    weights.iter_mut().for_each(|w| *w /= mean);
    Ok(())
}

/// Per-example loss weights under `weighting`, normalized to mean 1
/// (except `None`, which is all ones, and `Custom`, taken verbatim).
pub fn example_weights(data: &Dataset, weighting: &Weighting) -> Result<Vec<f64>> {
    let n = data.len();
    let from_counts = |counts: Vec<usize>, key: &dyn Fn(usize) -> usize, power: f64| -> Result<Vec<f64>> {
        let mut w: Vec<f64> = (0..n)
            .map(|i| (counts[key(i)] as f64).powf(-power))
            .collect();
        normalize_mean_one(&mut w)?;
        Ok(w)
    };
    let label = |i: usize| data.examples()[i].label;
    let group = |i: usize| data.group_index(i);
    match weighting {
        Weighting::None => Ok(vec![1.0; n]),
        Weighting::Custom => Ok(data.weights()),
        Weighting::ClassInverse => from_counts(data.class_counts(), &label, 1.0),
        Weighting::SqrtClassInverse => from_counts(data.class_counts(), &label, 0.5),
        Weighting::GroupInverse => from_counts(data.group_counts(), &group, 1.0),
        Weighting::SqrtGroupInverse => from_counts(data.group_counts(), &group, 0.5),
    }
}
